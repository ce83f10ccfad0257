"""Collect demonstrations, train f_phi and pi, and evaluate a small suite.

The sizes are small so the script finishes in about a minute and a half
on one core.  Scale ``N_DEMOS`` and the epoch counts up (600 demos, 40
policy epochs) to match the acceptance suite.

    python3 tutorials/02_train_and_evaluate.py
"""
import logging
import time

from ladle import dataset as ds
from ladle.ddpm import train_fphi, train_pi
from ladle.evaluation import TrialSuite, run_suite, wilson_interval
from ladle.runtime import Models

N_PRESCOOP, N_DEMOS = 100, 200
EPOCHS_FPHI, EPOCHS_PI = 400, 25

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
t0 = time.time()

# 1. Successful pre-scoop samples from the expert without recovery.
pre = ds.collect_prescoop(N_PRESCOOP, seed=3, workers=1)
fphi, fphi_loss = train_fphi(pre.records, epochs=EPOCHS_FPHI, seed=3)
print(f"f_phi: {len(pre.records)} samples, final loss {fphi_loss[-1]:.4f}")

# 2. Demonstrations started from f_phi pre-scoop poses, with recovery.
demos = ds.collect_policy_demos(N_DEMOS, seed=11, prescoop_source=fphi, workers=1)
episodes = list(demos.episodes().values())
pi, pi_loss, stopped = train_pi(episodes, seed=0, max_epochs=EPOCHS_PI, patience=EPOCHS_PI)
print(f"pi: {len(episodes)} episodes, stopped at epoch {stopped}, loss {pi_loss[-1]:.4f}")

# 3. A seeded trial suite; runs are identical for any worker count.
suite = TrialSuite("tutorial", n_trials=10, classes=("apple", "cork"), seed_base=500)
report = run_suite(suite, Models(fphi, pi), workers=1)
for row in report.rows:
    lo, hi = wilson_interval(row.successes, row.n_trials)
    print(f"{row.cls:>6}: {row.successes}/{row.n_trials}  95% CI [{lo:.2f}, {hi:.2f}]")
print(f"average rate {report.average_rate:.2f}, {time.time() - t0:.0f} s total")

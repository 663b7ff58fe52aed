"""Learning a MountainCar model from a random starting guess.

The controller is two LQRs, one aimed at each hill, built from a four
variable model. Only the model variables are learned; every action comes
from the Riccati solution of the current model.

Run with ``python demos/03_mountaincar.py`` (about half a minute).
"""

import numpy as np

from cbrl import ExperimentConfig, get_template, run_experiment
from cbrl.experiment import format_summary

config = ExperimentConfig.from_presets("mountaincar", names=("P1",), seeds=(0,), episodes=150)
report = run_experiment(config, checkpoints=[1, 10, 25, 50, 100, 150])
print(format_summary(report.summary))

run = report.runs[0]
names = get_template("mountaincar").variable_names
print("start:", dict(zip(names, np.round(run.variables[0], 3))))
print("final:", dict(zip(names, np.round(run.variables[-1], 3))))

"""Least-squares facts for a generated dataset, via numpy.

    tdcd gen-data --samples 8 --features 4 --noise 0.5 --seed 2024 --out g8.csv
    python3 normal_equations_golden.py g8.csv
"""
import sys

import numpy as np

data = np.loadtxt(sys.argv[1], delimiter=",", skiprows=1)
x, y = data[:, :-1], data[:, -1]
m = x.shape[0]
theta, *_ = np.linalg.lstsq(x, y, rcond=None)
resid = x @ theta - y
print("optimum", [float(v) for v in theta])
print("optimum_loss", float(resid @ resid / m))
print("smoothness", float(np.linalg.eigvalsh(2.0 / m * x.T @ x).max()))

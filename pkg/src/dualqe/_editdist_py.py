"""Pure-Python edit-distance kernels; same contract as the compiled module."""

import numpy as np


def levenshtein(a, b):
    m = len(b)
    prev = list(range(m + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            cur[j] = min(prev[j - 1] + (ai != b[j - 1]), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m]


def distance_table(a, b):
    n, m = len(a), len(b)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[0, :] = np.arange(m + 1)
    d[:, 0] = np.arange(n + 1)
    for i in range(1, n + 1):
        ai = a[i - 1]
        row, above = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(above[j - 1] + (ai != b[j - 1]), above[j] + 1, row[j - 1] + 1)
    return d

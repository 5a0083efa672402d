"""Pure-Python kernels. Reference behaviour for the compiled twin in
``_ckernels.pyx``; both must return identical results bit for bit."""

import math

import numpy as np

# Reduced costs within this fraction of the matrix scale count as tight.
TIGHT_RTOL = 1e-10


def hungarian(cost):
    """Minimum-cost perfect assignment of a square matrix.

    Returns ``col_of_row`` as an int64 array. Among all optimal assignments
    the lexicographically smallest ``col_of_row`` sequence is returned.
    """
    c = np.ascontiguousarray(cost, dtype=np.float64)
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rows = c.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    match = [0] * n
    for j in range(1, n + 1):
        match[p[j] - 1] = j - 1

    scale = 0.0
    for r in rows:
        for x in r:
            if abs(x) > scale:
                scale = abs(x)
    tol = TIGHT_RTOL * (scale if scale > 1.0 else 1.0)
    tight = [
        [j for j in range(n) if rows[i][j] - u[i + 1] - v[j + 1] <= tol]
        for i in range(n)
    ]
    return np.asarray(_lex_smallest(tight, match, n), dtype=np.int64)


def _lex_smallest(tight, match, n):
    """Rewire ``match`` into the lexicographically smallest perfect matching
    that only uses tight edges."""
    row_of = [0] * n
    for i in range(n):
        row_of[match[i]] = i
    fixed_col = [False] * n
    for i in range(n):
        for j in tight[i]:
            if fixed_col[j]:
                continue
            if j == match[i]:
                break
            # alternating path: row_of[j] must reach column match[i]
            target = match[i]
            start = row_of[j]
            prev_row = {start: -1}
            queue = [start]
            found = -1
            head = 0
            while head < len(queue) and found < 0:
                r = queue[head]
                head += 1
                for c in tight[r]:
                    if fixed_col[c] or c == j:
                        continue
                    if c == target:
                        found = r
                        break
                    nr = row_of[c]
                    if nr == i or nr in prev_row:
                        continue
                    prev_row[nr] = r
                    queue.append(nr)
            if found < 0:
                continue
            # shift along the path: found -> target, each predecessor takes its successor's column
            r = found
            c = target
            while r != -1:
                old = match[r]
                match[r] = c
                row_of[c] = r
                c = old
                r = prev_row[r]
            match[i] = j
            row_of[j] = i
            break
        fixed_col[match[i]] = True
    return match


def match_detections(frames, gt_frames, delta):
    """Greedy tolerance matching of detections (already in rank order).

    Each detection takes the nearest unmatched ground truth within ``delta``
    frames, ties going to the earlier frame. Returns ``(is_tp, gt_index)``
    with ``gt_index = -1`` for false positives.
    """
    frames = np.asarray(frames, dtype=np.int64).tolist()
    gts = np.asarray(gt_frames, dtype=np.int64).tolist()
    used = [False] * len(gts)
    tp = np.zeros(len(frames), dtype=bool)
    idx = np.full(len(frames), -1, dtype=np.int64)
    for k, f in enumerate(frames):
        best = -1
        best_d = delta + 1
        best_f = 0
        for g, gf in enumerate(gts):
            if used[g]:
                continue
            d = abs(gf - f)
            if d > delta:
                continue
            if d < best_d or (d == best_d and gf < best_f):
                best, best_d, best_f = g, d, gf
        if best >= 0:
            used[best] = True
            tp[k] = True
            idx[k] = best
    return tp, idx

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; mirror ``_pykernels`` exactly (same arithmetic order)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double TIGHT_RTOL = 1e-10


def hungarian(cost):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cdef double[:, ::1] cv = c
    cdef double *u = <double *> malloc((n + 1) * sizeof(double))
    cdef double *v = <double *> malloc((n + 1) * sizeof(double))
    cdef double *minv = <double *> malloc((n + 1) * sizeof(double))
    cdef Py_ssize_t *p = <Py_ssize_t *> malloc((n + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t *way = <Py_ssize_t *> malloc((n + 1) * sizeof(Py_ssize_t))
    cdef char *used = <char *> malloc((n + 1) * sizeof(char))
    cdef char *tight = <char *> malloc(n * n * sizeof(char))
    cdef Py_ssize_t *match = <Py_ssize_t *> malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur, ui0, scale, tol, x
    cdef cnp.ndarray[cnp.int64_t, ndim=1] result
    try:
        for j in range(n + 1):
            u[j] = 0.0
            v[j] = 0.0
            p[j] = 0
            way[j] = 0
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                ui0 = u[i0]
                delta = INFINITY
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = cv[i0 - 1, j - 1] - ui0 - v[j]
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
        for j in range(1, n + 1):
            match[p[j] - 1] = j - 1

        scale = 0.0
        for i in range(n):
            for j in range(n):
                x = fabs(cv[i, j])
                if x > scale:
                    scale = x
        tol = TIGHT_RTOL * (scale if scale > 1.0 else 1.0)
        for i in range(n):
            for j in range(n):
                tight[i * n + j] = (cv[i, j] - u[i + 1] - v[j + 1]) <= tol
        _lex_smallest(tight, match, n)
        result = np.empty(n, dtype=np.int64)
        for i in range(n):
            result[i] = match[i]
        return result
    finally:
        free(u); free(v); free(minv); free(p); free(way)
        free(used); free(tight); free(match)


cdef void _lex_smallest(char *tight, Py_ssize_t *match, Py_ssize_t n):
    cdef Py_ssize_t *row_of = <Py_ssize_t *> malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t *prev_row = <Py_ssize_t *> malloc(n * sizeof(Py_ssize_t))
    cdef char *seen = <char *> malloc(n * sizeof(char))
    cdef char *fixed_col = <char *> malloc(n * sizeof(char))
    cdef Py_ssize_t *queue = <Py_ssize_t *> malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t i, j, k, c, r, nr, old, target, start, found, head, tail
    for i in range(n):
        row_of[match[i]] = i
        fixed_col[i] = 0
    for i in range(n):
        for j in range(n):
            if not tight[i * n + j] or fixed_col[j]:
                continue
            if j == match[i]:
                break
            target = match[i]
            start = row_of[j]
            for k in range(n):
                seen[k] = 0
            seen[start] = 1
            prev_row[start] = -1
            queue[0] = start
            head = 0
            tail = 1
            found = -1
            while head < tail and found < 0:
                r = queue[head]
                head += 1
                for c in range(n):
                    if not tight[r * n + c] or fixed_col[c] or c == j:
                        continue
                    if c == target:
                        found = r
                        break
                    nr = row_of[c]
                    if nr == i or seen[nr]:
                        continue
                    seen[nr] = 1
                    prev_row[nr] = r
                    queue[tail] = nr
                    tail += 1
            if found < 0:
                continue
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
        fixed_col[match[i]] = 1
    free(row_of); free(prev_row); free(seen); free(fixed_col); free(queue)


def match_detections(frames, gt_frames, long delta):
    cdef cnp.ndarray[cnp.int64_t, ndim=1] fr = np.ascontiguousarray(frames, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] gt = np.ascontiguousarray(gt_frames, dtype=np.int64)
    cdef Py_ssize_t nd = fr.shape[0], ng = gt.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] used = np.zeros(ng, dtype=np.uint8)
    tp_arr = np.zeros(nd, dtype=bool)
    idx_arr = np.full(nd, -1, dtype=np.int64)
    cdef cnp.uint8_t[::1] tp = tp_arr.view(np.uint8)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef Py_ssize_t k, g, best
    cdef long f, d, best_d, best_f, gf
    for k in range(nd):
        f = fr[k]
        best = -1
        best_d = delta + 1
        best_f = 0
        for g in range(ng):
            if used[g]:
                continue
            gf = gt[g]
            d = gf - f if gf >= f else f - gf
            if d > delta:
                continue
            if d < best_d or (d == best_d and gf < best_f):
                best = g
                best_d = d
                best_f = gf
        if best >= 0:
            used[best] = 1
            tp[k] = 1
            idx[k] = best
    return tp_arr, idx_arr

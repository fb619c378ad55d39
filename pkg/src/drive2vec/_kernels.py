"""Hot loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical semantics.  The numba
versions are used unless numba is missing or ``DRIVE2VEC_DISABLE_NUMBA`` is
set to a truthy value before import.  ``benchmarks/bench_kernels.py`` times
both paths against each other.
"""
import os

import numpy as np

_DISABLED = os.environ.get("DRIVE2VEC_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# ---------------------------------------------------------------- numpy path


def sliding_range_numpy(x, width):
    """max - min of every length-``width`` window of a 1-d array."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape[0] < width:
        return np.zeros(0)
    view = np.lib.stride_tricks.sliding_window_view(x, width)
    return view.max(axis=1) - view.min(axis=1)


def average_ranks_numpy(values):
    """1-based ranks with ties given the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # starts of tie groups
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], n]
    group_rank = (starts + ends + 1) / 2.0
    sizes = ends - starts
    ranks = np.empty(n)
    ranks[order] = np.repeat(group_rank, sizes)
    return ranks


def perplexity_search_numpy(sq_dists, target_entropy, tol, max_iter):
    """Row-wise bisection on the Gaussian precision ``beta``.

    Returns the conditional affinity matrix (rows sum to one, zero diagonal),
    the per-row betas and the per-row final absolute entropy error.
    """
    n = sq_dists.shape[0]
    beta = np.ones(n)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    mask = ~np.eye(n, dtype=bool)
    # shift rows by their off-diagonal minimum (entropy is shift-invariant);
    # the diagonal stays 0 so exp never overflows there before masking
    d = np.where(mask, sq_dists, np.inf)
    shifted = np.where(mask, d - d.min(axis=1, keepdims=True), 0.0)
    err = np.full(n, np.inf)
    P = np.zeros((n, n))
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        w = np.exp(-shifted * beta[:, None]) * mask
        s = w.sum(axis=1)
        P_new = w / s[:, None]
        H = np.log(s) + beta * ((P_new * shifted).sum(axis=1))
        diff = H - target_entropy
        P[active] = P_new[active]
        err[active] = np.abs(diff[active])
        active &= err > tol
        if not active.any():
            break
        up = active & (diff > 0)
        down = active & (diff <= 0)
        lo[up] = beta[up]
        beta[up] = np.where(np.isinf(hi[up]), beta[up] * 2.0, (beta[up] + hi[up]) / 2.0)
        hi[down] = beta[down]
        beta[down] = np.where(np.isinf(lo[down]), beta[down] / 2.0, (beta[down] + lo[down]) / 2.0)
    return P, beta, err


def tsne_kl_grad_numpy(P, Y, exaggeration):
    """KL(P || Q) and its gradient for Student-t embeddings.

    ``P`` is the symmetric joint affinity matrix (sums to one); the
    exaggeration multiplies P inside the gradient and the reported KL.
    """
    sum_y = (Y * Y).sum(axis=1)
    num = 1.0 / (1.0 + sum_y[:, None] + sum_y[None, :] - 2.0 * (Y @ Y.T))
    np.fill_diagonal(num, 0.0)
    Z = num.sum()
    Q = np.maximum(num / Z, 1e-300)
    PE = exaggeration * P
    nz = PE > 0
    kl = float((PE[nz] * np.log(PE[nz] / Q[nz])).sum())
    W = (PE - num / Z) * num
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    return kl, grad


def simulate_vehicle_py(
    v_target, yaw_profile, gas_override, brake_override, hold_brake,
    pedal_noise, accel_noise, wiggle_noise, temp_noise,
    temp_target, gain, accel_max, decel_max, alpha, max_rate, shift_thresholds, v0,
    grade_innov, curve_innov, phi_grade, phi_curve,
):
    """Integrate speed, pedals, gear and heading at 10 Hz.

    Overrides are NaN where inactive; otherwise they set the pedal directly,
    bypassing the per-step rate limit that keeps normal pedal motion slow.
    Road grade (%) and bend curvature (deg/m) are AR(1) processes fed by
    ``grade_innov``/``curve_innov``; bends steer back toward the road's mean
    direction so the heading stays bounded.
    Returns a (T, 11) array: speed, gas, brake, accel, gear, heading, yaw,
    x, y, engine_temp, wiggle.
    """
    dt = 0.1
    T = v_target.shape[0]
    out = np.zeros((T, 11))
    v = v0
    gas = 0.0
    brake = 0.0
    gas_f = 0.0
    brake_f = 0.0
    heading = 0.0
    x = 0.0
    y = 0.0
    temp = temp_target[0]
    wig = 0.0
    grade = 0.0
    curv = 0.0
    bend = 0.0
    for i in range(T):
        grade = phi_grade * grade + grade_innov[i]
        curv = phi_curve * curv + (1.0 - phi_curve) * (-0.01 * bend) + curve_innov[i]
        slope = 0.353 * grade if v > 0.0 else 0.0  # km/h/s per percent
        drag = 0.5 + 0.00025 * v * v + slope if v > 0.0 else 0.0
        a_cmd = gain * (v_target[i] - v)
        if a_cmd > accel_max:
            a_cmd = accel_max
        elif a_cmd < -decel_max:
            a_cmd = -decel_max
        need = (a_cmd + drag) / 0.15
        g_t = need if need > 0.0 else 0.0
        b_t = -need if need < 0.0 else 0.0
        if v_target[i] <= 0.0 and v < 1.0:
            g_t = 0.0
            if b_t < hold_brake:
                b_t = hold_brake
        if g_t > 100.0:
            g_t = 100.0
        if b_t > 100.0:
            b_t = 100.0
        gas_f += alpha * (g_t - gas_f)
        brake_f += alpha * (b_t - brake_f)
        g_new = gas_f + pedal_noise[i] if gas_f > 1.0 else gas_f
        b_new = brake_f
        # rate limit: keeps any 0.4 s pedal swing below 3 * max_rate
        if g_new > gas + max_rate:
            g_new = gas + max_rate
        elif g_new < gas - max_rate:
            g_new = gas - max_rate
        if b_new > brake + max_rate:
            b_new = brake + max_rate
        elif b_new < brake - max_rate:
            b_new = brake - max_rate
        if not np.isnan(gas_override[i]):
            g_new = gas_override[i]
            gas_f = g_new
        if not np.isnan(brake_override[i]):
            b_new = brake_override[i]
            brake_f = b_new
            g_new = 0.0
            gas_f = 0.0
        gas = min(max(g_new, 0.0), 100.0)
        brake = min(max(b_new, 0.0), 100.0)
        accel = 0.15 * gas - 0.15 * brake - drag
        if v <= 0.0 and accel < 0.0:
            accel = 0.0
        v = v + accel * dt
        if v < 0.0:
            v = 0.0
        gear = 1.0
        for th in shift_thresholds:
            if v > th:
                gear += 1.0
        wig = 0.9 * wig + wiggle_noise[i]
        yaw_bend = v / 3.6 * curv if v > 1.0 else 0.0
        bend += yaw_bend * dt
        yaw = yaw_profile[i] + yaw_bend + (wig if v > 1.0 else 0.0)
        heading += yaw * dt
        x += v / 3.6 * dt * np.sin(heading * np.pi / 180.0)
        y += v / 3.6 * dt * np.cos(heading * np.pi / 180.0)
        temp += (temp_target[i] - temp) * dt / 60.0 + temp_noise[i]
        out[i, 0] = v
        out[i, 1] = gas
        out[i, 2] = brake
        out[i, 3] = (accel + slope) / 3.6 + accel_noise[i]
        out[i, 4] = gear
        out[i, 5] = heading
        out[i, 6] = yaw
        out[i, 7] = x
        out[i, 8] = y
        out[i, 9] = temp
        out[i, 10] = wig
    return out


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def sliding_range_numba(x, width):
        n = x.shape[0] - width + 1
        if n <= 0:
            return np.zeros(0)
        out = np.empty(n)
        for i in range(n):
            lo = x[i]
            hi = x[i]
            for j in range(i + 1, i + width):
                v = x[j]
                if v < lo:
                    lo = v
                elif v > hi:
                    hi = v
            out[i] = hi - lo
        return out

    @njit(cache=True)
    def average_ranks_numba(values):
        n = values.shape[0]
        order = np.argsort(values, kind="mergesort")
        ranks = np.empty(n)
        i = 0
        while i < n:
            j = i
            while j + 1 < n and values[order[j + 1]] == values[order[i]]:
                j += 1
            r = (i + j + 2) / 2.0
            for k in range(i, j + 1):
                ranks[order[k]] = r
            i = j + 1
        return ranks

    @njit(cache=True)
    def perplexity_search_numba(sq_dists, target_entropy, tol, max_iter):
        n = sq_dists.shape[0]
        P = np.zeros((n, n))
        betas = np.ones(n)
        errs = np.zeros(n)
        row = np.empty(n)
        for i in range(n):
            beta = 1.0
            lo = -np.inf
            hi = np.inf
            dmin = np.inf
            for j in range(n):
                if j != i and sq_dists[i, j] < dmin:
                    dmin = sq_dists[i, j]
            err = np.inf
            for _ in range(max_iter):
                s = 0.0
                for j in range(n):
                    if j == i:
                        row[j] = 0.0
                    else:
                        row[j] = np.exp(-(sq_dists[i, j] - dmin) * beta)
                    s += row[j]
                acc = 0.0
                for j in range(n):
                    row[j] /= s
                    if j != i:
                        acc += row[j] * (sq_dists[i, j] - dmin)
                H = np.log(s) + beta * acc
                diff = H - target_entropy
                err = abs(diff)
                if err <= tol:
                    break
                if diff > 0:
                    lo = beta
                    beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
                else:
                    hi = beta
                    beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
            # the loop exits right after evaluating, so row matches beta unless
            # max_iter ran out, in which case it matches the last evaluated one
            for j in range(n):
                P[i, j] = row[j]
            betas[i] = beta
            errs[i] = err
        return P, betas, errs

    @njit(cache=True)
    def tsne_kl_grad_numba(P, Y, exaggeration):
        n, dim = Y.shape
        num = np.zeros((n, n))
        Z = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                d = 0.0
                for k in range(dim):
                    t = Y[i, k] - Y[j, k]
                    d += t * t
                q = 1.0 / (1.0 + d)
                num[i, j] = q
                num[j, i] = q
                Z += 2.0 * q
        kl = 0.0
        grad = np.zeros((n, dim))
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                p = exaggeration * P[i, j]
                q = num[i, j] / Z
                if p > 0:
                    kl += p * np.log(p / max(q, 1e-300))
                w = (p - q) * num[i, j]
                for k in range(dim):
                    grad[i, k] += 4.0 * w * (Y[i, k] - Y[j, k])
        return kl, grad

    simulate_vehicle_numba = njit(cache=True)(simulate_vehicle_py)

else:  # pragma: no cover - exercised only without numba
    sliding_range_numba = None
    average_ranks_numba = None
    perplexity_search_numba = None
    tsne_kl_grad_numba = None
    simulate_vehicle_numba = None


NUMPY_KERNELS = {
    "sliding_range": sliding_range_numpy,
    "average_ranks": average_ranks_numpy,
    "perplexity_search": perplexity_search_numpy,
    "tsne_kl_grad": tsne_kl_grad_numpy,
    "simulate_vehicle": simulate_vehicle_py,
}

NUMBA_KERNELS = {
    "sliding_range": sliding_range_numba,
    "average_ranks": average_ranks_numba,
    "perplexity_search": perplexity_search_numba,
    "tsne_kl_grad": tsne_kl_grad_numba,
    "simulate_vehicle": simulate_vehicle_numba,
} if HAS_NUMBA else {}

_active = NUMBA_KERNELS if HAS_NUMBA else NUMPY_KERNELS

sliding_range = _active["sliding_range"]
average_ranks = _active["average_ranks"]
perplexity_search = _active["perplexity_search"]
tsne_kl_grad = _active["tsne_kl_grad"]
simulate_vehicle = _active["simulate_vehicle"]

BACKEND = "numba" if HAS_NUMBA else "numpy"

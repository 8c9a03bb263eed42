"""Independent reference computations used by the tests."""
import numpy as np

from splat_oed.render import activity_map, render
from splat_oed.scene import FULL_MASK, flatten_params, unflatten_params


def finite_difference_check(scene, cam, jac, eps=1e-4, abs_tol=1e-4, rel_tol=1e-3, columns=None):
    """Compare a dense Jacobian with central differences of the renderer.

    Pixels whose clamp or cutoff state differs between the two probes are
    excluded. Returns ``(worst error / tolerance, number of compared entries)``.
    """
    x, imap = flatten_params(scene, FULL_MASK)
    worst, compared = 0.0, 0
    for k in range(len(x)) if columns is None else columns:
        xp, xm = x.copy(), x.copy()
        xp[k] += eps
        xm[k] -= eps
        sp, sm = unflatten_params(scene, xp, imap), unflatten_params(scene, xm, imap)
        unstable = np.any(activity_map(sp, cam) != activity_map(sm, cam), axis=2).reshape(-1)
        fd = (render(sp, cam).pixels - render(sm, cam).pixels).reshape(-1, 3) / (2 * eps)
        an = jac[:, k].reshape(-1, 3)
        keep = ~unstable
        err = np.abs(fd - an)[keep]
        tol = np.maximum(abs_tol, rel_tol * np.abs(an[keep]))
        if err.size:
            worst = max(worst, float((err / tol).max()))
            compared += err.size
    return worst, compared


def dense_block(J, g, P):
    """Diagonal block of ``J^T J`` belonging to Gaussian ``g``."""
    Jg = J[:, g * P:(g + 1) * P]
    return Jg.T @ Jg


def functional_from_dense(H, lam, kind, e_variant="max", block=None):
    """Uncertainty functionals of ``(H + lam I)^-1`` via eigen-decomposition.

    With ``block`` set, ``H`` is taken as block diagonal with that block size
    and each block is decomposed on its own.
    """
    R = H + lam * np.eye(len(H))
    if block is None:
        w = np.linalg.eigvalsh(R)
    else:
        w = np.concatenate([np.linalg.eigvalsh(R[i:i + block, i:i + block])
                            for i in range(0, len(R), block)])
    sigma = 1.0 / w
    if kind == "t":
        return float(np.mean(sigma))
    if kind == "a":
        return float(1.0 / np.mean(w))
    if kind == "d":
        return float(np.exp(np.mean(np.log(sigma))))
    if kind == "e":
        return float(sigma.max() if e_variant == "max" else sigma.min())
    raise ValueError(kind)


def block_diag_dense(blocks):
    n, P, _ = blocks.shape
    H = np.zeros((n * P, n * P))
    for g in range(n):
        H[g * P:(g + 1) * P, g * P:(g + 1) * P] = blocks[g]
    return H


def brute_force_greedy(prior_blocks, cand_blocks, lam, k, kind, maximize=False, e_variant="max"):
    """Greedy selection re-evaluated from scratch with dense linear algebra.

    ``prior_blocks`` is ``(G, P, P)``; ``cand_blocks`` maps id -> ``(G, P, P)``.
    Ties go to the smallest id.
    """
    H = block_diag_dense(prior_blocks)
    pool = dict(cand_blocks)
    chosen = []
    for _ in range(k):
        best_id, best = None, None
        for vid in sorted(pool):
            C = block_diag_dense(pool[vid])
            if kind == "fisherrf":
                s = float(np.trace(C @ np.linalg.inv(H + lam * np.eye(len(H)))))
            else:
                s = functional_from_dense(H + C, lam, kind, e_variant, block=prior_blocks.shape[1])
            if best is None or (s > best if maximize else s < best):
                best_id, best = vid, s
        chosen.append(best_id)
        H = H + block_diag_dense(pool.pop(best_id))
    return chosen

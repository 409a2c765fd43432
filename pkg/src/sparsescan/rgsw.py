"""Regional-to-global sliding window encoding of a serialized sequence."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .nn import expand


@dataclass(frozen=True)
class PatchLayout:
    n: int               # real sequence length
    m: int               # patch count
    patch_len: int       # rows per patch, excluding the token

    @property
    def padded_len(self) -> int:
        return self.m * self.patch_len

    @property
    def pad(self) -> np.ndarray:
        """(M, P) mask, True on padding rows."""
        return (np.arange(self.padded_len) >= self.n).reshape(self.m, self.patch_len)


def patch_layout(n: int, m: int, even: bool = False) -> PatchLayout:
    if m < 1:
        raise ValueError(f"patch count must be >= 1, got {m}")
    p = max(1, math.ceil(n / m))
    if even and p % 2:
        p += 1
    return PatchLayout(n, m, p)


def patch_count(n: int, target_len: int = 64) -> int:
    """Patch count giving patches of roughly ``target_len`` rows."""
    return max(1, round(n / target_len))


def _with_tokens(body, token):
    """Append ``token`` as the last row of every patch in ``body`` (M, P, D)."""
    M, P, D = body.shape
    tok = expand(token, (M, 1, D), (0, 1))
    return dc.concat([body, tok], axis=1)


def split_and_insert(x, m: int, token, even: bool = False):
    """Cut ``x`` (N, D) into M contiguous patches, zero-pad, append the token.

    Returns the ``(M, P+1, D)`` tensor and its layout; padding rows sit just
    before each token.
    """
    x = dc.tensor(x)
    n, d = x.shape
    layout = patch_layout(n, m, even)
    extra = layout.padded_len - n
    if extra:
        x = dc.concat([x, np.zeros((extra, d))], axis=0)
    return _with_tokens(dc.reshape(x, (m, layout.patch_len, d)), token), layout


def propagate_token(encoded, pad=None):
    """x'_ij += cos(x'_ij, T'_i) T'_i on every body row, then drop the token row.

    ``encoded`` is ``(M, P+1, D)`` with the encoded token last; padding rows
    (``pad`` True) are left as they are.
    """
    M, P1, D = encoded.shape
    P = P1 - 1
    body = encoded[:, :P]
    tok = dc.broadcast_to(encoded[:, P:], (M, P, D))
    sim = dc.cosine_similarity(body, tok, axis=-1)
    update = expand(sim, (M, P, D), (-1,)) * tok
    if pad is not None:
        keep = 1.0 - np.asarray(pad, dtype=np.float64)
        update = update * np.broadcast_to(keep[..., None], update.shape)
    return body + update


def slide(patches):
    """Pair the later half of patch i with the former half of patch i+1."""
    M, P, D = patches.shape
    if P % 2:
        raise ValueError(f"slide needs an even patch length, got {P}")
    if M < 2:
        return patches[:0]
    h = P // 2
    return dc.concat([patches[:-1, h:], patches[1:, :h]], axis=1)


def _encode_windows(block, body, token, pad, coords, propagate: bool):
    """Insert tokens, run the block, optionally propagate; returns body rows and logits."""
    M, P, D = body.shape
    pad_full = np.concatenate([pad, np.zeros((M, 1), bool)], axis=1)
    if coords is not None:
        coords = np.concatenate([coords, np.zeros((M, 1, 3), np.int64)], axis=1)
        valid = ~pad_full
        valid[:, -1] = False
    else:
        valid = None
    nonvoxel = pad_full.copy()
    nonvoxel[:, -1] = True
    out = block(_with_tokens(body, token), coords, valid, pad_full, nonvoxel)
    y = out.y
    body_out = propagate_token(y, pad) if propagate else y[:, :P]
    return body_out, out


def rgsw_encode(x, block, m: int, t: int, token, coords=None, propagate_every: bool = True,
                schedule: str = "alternate"):
    """Encode ``x`` (N, D) patch-wise, then with half-shifted windows, ``t`` passes total.

    Pass 1 uses the regional patches.  With ``schedule="alternate"`` later passes
    alternate between shifted and regional windows; ``schedule="slide"`` uses
    the shifted windows for every later pass.  Rows outside the shifted windows
    (first and last half patch) are carried through unchanged.  Encoder weights
    and the local token are shared by all passes.  Returns ``(y, first_pass)``
    where ``first_pass`` is the block output of pass 1 (for its logits).
    """
    if t < 1:
        raise ValueError(f"iteration count must be >= 1, got {t}")
    x = dc.tensor(x)
    n, d = x.shape
    layout = patch_layout(n, m, even=t > 1)
    M, P = layout.m, layout.patch_len
    pad_rows = np.arange(layout.padded_len) >= n
    if coords is not None:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        coords = np.concatenate([coords, np.zeros((layout.padded_len - n, 3), np.int64)])
    seq = x if layout.padded_len == n else dc.concat([x, np.zeros((layout.padded_len - n, d))], axis=0)

    def run(rows, start, count, propagate):
        body = dc.reshape(rows, (count, P, d))
        pad = pad_rows[start:start + count * P].reshape(count, P)
        cw = None if coords is None else coords[start:start + count * P].reshape(count, P, 3)
        out_body, out = _encode_windows(block, body, token, pad, cw, propagate)
        return dc.reshape(out_body, (count * P, d)), out

    seq, first = run(seq, 0, M, True)
    for it in range(2, t + 1):
        shifted = schedule == "slide" or it % 2 == 0
        if not shifted:
            seq, _ = run(seq, 0, M, propagate_every)
            continue
        if M < 2:
            continue
        h = P // 2
        inner, _ = run(seq[h:layout.padded_len - h], h, M - 1, propagate_every)
        seq = dc.concat([seq[:h], inner, seq[layout.padded_len - h:]], axis=0)
    return (seq if layout.padded_len == n else seq[:n]), first


def receptive_field(encode, x, positions=None, eps: float = 1.0, threshold: float = 1e-9):
    """Perturbation sweep: rows ``(perturbed_pos, affected_pos, delta)`` with |delta| > threshold.

    ``encode`` maps an ``(N, D)`` array to an ``(N, D)`` array.
    """
    x = np.asarray(x, dtype=np.float64)
    with dc.no_grad():
        base = np.asarray(dc.tensor(encode(x)).data)
        rows = []
        for p in (range(len(x)) if positions is None else positions):
            bumped = x.copy()
            bumped[p] += eps
            delta = np.abs(np.asarray(dc.tensor(encode(bumped)).data) - base).max(axis=1)
            for q in np.nonzero(delta > threshold)[0]:
                rows.append((int(p), int(q), float(delta[q])))
    return rows


def receptive_field_csv(rows) -> str:
    lines = ["perturbed_pos,affected_pos,delta"]
    lines += [f"{p},{q},{d:.10g}" for p, q, d in rows]
    return "\n".join(lines) + "\n"

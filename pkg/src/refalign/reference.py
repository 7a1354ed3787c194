"""Learnable per-identity references and masked-token reconstruction.

The bank holds one d-vector per training identity.  Fusion and guidance
move it globally; the reconstruction path injects local detail: mask a
few caption tokens, re-encode, then decode the missing tokens through
cross-attention onto the identity's reference, which serves as the
single key/value row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import MASK_ID, N_SPECIAL, STREAM_MASK, STREAM_MODEL, derive_rng
from .encoders import AttentionBlock, linear, linear_init
from .tensor import Tensor

_BANK_STD = 0.02
_N_STAGES = 3


class ReferenceBank:
    """m x d learnable matrix plus an identity-to-row map."""

    def __init__(self, identity_ids, d: int, rng: np.random.Generator):
        ids = [int(i) for i in identity_ids]
        if not ids:
            raise ValueError("reference bank: no identities")
        if len(set(ids)) != len(ids):
            raise ValueError("reference bank: duplicate identity ids")
        if d < 1:
            raise ValueError(f"reference bank: bad width {d}")
        self.identity_ids = ids
        self._row_of = {ident: row for row, ident in enumerate(ids)}
        self.ref = T.parameter(rng.normal(0.0, _BANK_STD, size=(len(ids), d)),
                               "reference.bank")

    @property
    def m(self) -> int:
        return len(self.identity_ids)

    @property
    def d(self) -> int:
        return self.ref.shape[1]

    def row_index(self, labels) -> np.ndarray:
        labels = np.asarray(labels).ravel()
        try:
            return np.asarray([self._row_of[int(i)] for i in labels], dtype=np.intp)
        except KeyError as e:
            raise KeyError(f"reference bank: identity {e.args[0]} has no row") from None

    def rows_for(self, labels) -> Tensor:
        """Gather rows by identity label; gradients accumulate across
        duplicate labels."""
        return T.take_rows(self.ref, self.row_index(labels))

    def matrix(self) -> np.ndarray:
        return self.ref.data


def init_reference_bank(m: int, d: int, seed: int) -> ReferenceBank:
    return ReferenceBank(range(m), d, derive_rng(seed, STREAM_MODEL, 0))


# ------------------------------------------------------------------ masking

@dataclass(frozen=True)
class MaskedText:
    tokens: np.ndarray     # sequence with MASK written in
    positions: np.ndarray  # ascending masked positions
    targets: np.ndarray    # original ids at those positions


def mask_tokens(tokens, ratio: float, rng) -> MaskedText:
    """Replace round(ratio * maskable) tokens (at least one when the
    ratio is positive) with MASK.

    Only non-special tokens are maskable; BOS, EOS, and PAD never are.
    Ratio 0 and a sequence with no maskable tokens (a fully dropped text
    is legal) both come back unchanged with empty positions.  rng may be
    a Generator or a plain int seed.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError(f"mask_tokens: need a non-empty 1-d sequence, got shape {tokens.shape}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask_tokens: ratio {ratio} outside [0, 1]")
    if not isinstance(rng, np.random.Generator):
        rng = derive_rng(int(rng), STREAM_MASK)
    maskable = np.flatnonzero(tokens >= N_SPECIAL)
    if ratio == 0.0 or maskable.size == 0:
        empty = np.empty(0, dtype=np.intp)
        return MaskedText(tokens.copy(), empty, tokens[empty].copy())
    k = max(1, round(ratio * maskable.size))
    chosen = np.sort(rng.choice(maskable, size=k, replace=False))
    out = tokens.copy()
    targets = out[chosen].copy()
    out[chosen] = MASK_ID
    return MaskedText(out, chosen, targets)


# ----------------------------------------------------------- reconstruction

@dataclass
class ReconstructionOutput:
    hidden: Tensor    # (B, L, d) decoder states
    selected: Tensor  # (|M|, d) states at the masked positions
    probs: Tensor     # (|M|, V) rows sum to one


class LocalReconstructor:
    """Decoder over masked token states, conditioned on a reference.

    Four perceptron layers: an input projection on the token states, one
    key and one value projection turning the reference row into the
    cross-attention memory (shared by every stage), and the vocabulary
    head.  Between them sit three stages of self-attention then
    cross-attention blocks.
    """

    def __init__(self, d: int, n_heads: int, vocab_size: int,
                 rng: np.random.Generator, n_stages: int = _N_STAGES):
        if n_stages < 1:
            raise ValueError(f"reconstructor: need at least one stage, got {n_stages}")
        P = T.parameter
        self.d = d
        self.vocab_size = vocab_size
        self.w_in = P(linear_init(rng, d, d), "recon.w_in")
        self.b_in = P(np.zeros(d), "recon.b_in")
        self.w_key = P(linear_init(rng, d, d), "recon.w_key")
        self.b_key = P(np.zeros(d), "recon.b_key")
        self.w_val = P(linear_init(rng, d, d), "recon.w_val")
        self.b_val = P(np.zeros(d), "recon.b_val")
        self.stages = [
            (AttentionBlock(d, n_heads, rng, name=f"recon.stage{i}.self"),
             AttentionBlock(d, n_heads, rng, cross=True, name=f"recon.stage{i}.cross"))
            for i in range(n_stages)
        ]
        self.w_head = P(linear_init(rng, d, vocab_size), "recon.w_head")
        self.b_head = P(np.zeros(vocab_size), "recon.b_head")

    def parameters(self) -> list[Tensor]:
        out = [self.w_in, self.b_in, self.w_key, self.b_key, self.w_val, self.b_val]
        for sb, cb in self.stages:
            out.extend(sb.parameters())
            out.extend(cb.parameters())
        out += [self.w_head, self.b_head]
        return out

    def __call__(self, token_states: Tensor, references: Tensor,
                 mask_rows, mask_cols,
                 key_mask: np.ndarray | None = None) -> ReconstructionOutput:
        """token_states: (B, L, d) encoder output of the masked batch;
        references: (B, d), each sample's own identity row;
        mask_rows/mask_cols: flat index lists of the masked positions."""
        if token_states.ndim != 3 or token_states.shape[2] != self.d:
            raise T.ShapeError(f"reconstructor: token states {token_states.shape}, want (B, L, {self.d})")
        B, L, d = token_states.shape
        if references.shape != (B, d):
            raise T.ShapeError(f"reconstructor: references {references.shape}, want {(B, d)}")
        mask_rows = np.asarray(mask_rows, dtype=np.intp)
        mask_cols = np.asarray(mask_cols, dtype=np.intp)
        if mask_rows.shape != mask_cols.shape or mask_rows.ndim != 1 or mask_rows.size == 0:
            raise T.ShapeError("reconstructor: need matching non-empty mask index lists")
        if mask_rows.max() >= B or mask_cols.max() >= L or mask_rows.min() < 0 or mask_cols.min() < 0:
            raise T.ShapeError("reconstructor: mask position outside the batch")

        ref_rows = T.reshape(references, (B, 1, d))
        keys = linear(ref_rows, self.w_key, self.b_key)
        values = linear(ref_rows, self.w_val, self.b_val)
        x = linear(token_states, self.w_in, self.b_in)
        for self_block, cross_block in self.stages:
            x = self_block(x, key_mask=key_mask)
            x = cross_block(x, keys=keys, values=values)
        flat = T.reshape(x, (B * L, d))
        selected = T.take_rows(flat, mask_rows * L + mask_cols)
        logits = linear(selected, self.w_head, self.b_head)
        return ReconstructionOutput(hidden=x, selected=selected,
                                    probs=T.row_softmax(logits))

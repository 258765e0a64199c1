"""Point-prompt generation, prompt-propagating blocks and class-token pooling."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import numerics as nx
from .backbone import block_forward, final_norm
from .errors import ContractError
from .numerics import Tensor


def gen_prompt(emb):
    """Channel-wise max plus channel-wise mean over the group rows."""
    if emb.shape[-2] < 1:
        raise ContractError("gen_prompt needs at least one embedding row")
    return emb.max(axis=-2) + emb.mean(axis=-2)


@dataclass
class LevelTrace:
    level: int
    input_rows: int
    prompt_in: object   # the p_0 slice that entered this block (ndarray) or None


@dataclass
class BlockState:
    cls: Tensor          # (..., 1, d)
    prompts: Tensor      # (..., level, d); zero rows when prompts are disabled
    tokens: Tensor       # (..., N_s, d)
    level: int
    trace: list = field(default_factory=list)

    def rows(self):
        return nx.concat([self.cls, self.prompts, self.tokens], axis=-2)


def _rows(x):
    return nx.reshape(x, x.shape[:-1] + (1, x.shape[-1]))


def prompted_forward(tokens, p0, cls, backbone, use_prompt=True):
    """Run all blocks with a fresh ``p0`` prepended to the carried prompts.

    Block 1 sees ``[cls, p0, E]``; block ``l`` sees ``[cls, p0, Z, E]`` with
    ``Z`` the ``l - 1`` prompt outputs of the previous block. Its output is
    split back positionally into ``(cls, Z, E)`` with ``Z`` of ``l`` rows.
    With ``use_prompt=False`` the blocks see only ``[cls, E]``.
    """
    cfg = backbone.config
    if tokens.shape[-1] != cfg.d:
        raise ContractError(f"token width {tokens.shape[-1]} does not match backbone d={cfg.d}")
    lead = tokens.shape[:-2]
    n_s = tokens.shape[-2]
    cls_rows = nx.broadcast_to(cls, lead + (1, cfg.d))
    prompt_row = _rows(p0) if use_prompt else None
    prompts = None
    trace = []
    for l in range(1, cfg.L + 1):
        parts = [cls_rows]
        if use_prompt:
            parts.append(prompt_row)
            if prompts is not None:
                parts.append(prompts)
        parts.append(tokens)
        x = nx.concat(parts, axis=-2)
        expected = 1 + (l if use_prompt else 0) + n_s
        if x.shape[-2] != expected:
            raise ContractError(f"block {l} input has {x.shape[-2]} rows, expected {expected}")
        trace.append(LevelTrace(l, x.shape[-2],
                                x.data[..., 1, :].copy() if use_prompt else None))
        y = block_forward(x, backbone, l - 1)
        if l == cfg.L and cfg.final_norm:
            y = final_norm(y, backbone)
        n_prompt = l if use_prompt else 0
        cls_rows = y[..., 0:1, :]
        prompts = y[..., 1:1 + n_prompt, :] if use_prompt else None
        tokens = y[..., 1 + n_prompt:, :]
    if prompts is None:
        prompts = Tensor(tokens.data[..., :0, :])
    return BlockState(cls_rows, prompts, tokens, cfg.L, trace)


def pool_cls(state):
    """Channel-wise max plus mean over ``[cls; Z; E]`` rows."""
    rows = state.rows()
    return rows.max(axis=-2) + rows.mean(axis=-2)

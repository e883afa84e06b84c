"""Full block-stack inference over token ids.

Each block computes, from its input I of shape (L, d_m):

    X = silu(causal_conv(I @ in_proj^T))
    Delta = softplus(delta_proj(X))         delta_proj defaults to identity
    B, C = split(X @ bc_proj^T)
    Y = scan(X, Delta, B, C)                vanilla or token-filtered
    O = (silu(I @ gate_proj^T) * (Y + D * X)) @ out_proj^T

Blocks sit in a pre-norm residual stack: h += block(rms_norm(h) * norm_scale),
with a final norm before the tied head. Inference runs in float32.

Token-filtered mode derives per-layer policies from a channel classification
plus a threshold table looked up at the current sequence length. An all-zero
table reproduces vanilla outputs bitwise, since no positive step size can
fall below zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import channels as ch_mod
from .manifest import LayerWeights, ModelBundle
from .ssm import FilterPolicy, SsmInputs, scan_step, selective_scan, filtered_scan, softplus

__all__ = [
    "RunMode",
    "VANILLA",
    "RunModeError",
    "rms_norm",
    "causal_conv",
    "block_forward",
    "forward",
    "trace_ssm_inputs",
    "DecodeSession",
    "generate_greedy",
]

RMS_EPS = 1e-5


class RunModeError(ValueError):
    """Inconsistent run-mode configuration."""


@dataclass(frozen=True)
class RunMode:
    """vanilla, or longmamba (token filtering on classified global channels).

    The table alone determines inference behavior: the channels holding table
    entries are exactly the classified global set. A classification may be
    attached for reporting; when present it must cover the table's layers.
    """

    variant: str = "vanilla"
    classifications: list[ch_mod.ChannelClassification] | None = None
    table: ch_mod.ThresholdTable | None = None

    def __post_init__(self):
        if self.variant not in ("vanilla", "longmamba"):
            raise RunModeError(f"unknown variant {self.variant!r}")
        if self.variant == "longmamba":
            if self.table is None:
                raise RunModeError("longmamba mode requires a threshold table")
            if self.classifications is not None:
                have = {c.layer for c in self.classifications}
                need = set(self.table.layers)
                if not need <= have:
                    raise RunModeError(
                        f"table covers unclassified layers: {sorted(need - have)}"
                    )
                for c in self.classifications:
                    table_globals = set(self.table.layers.get(c.layer, {}))
                    labeled = set(int(i) for i in np.flatnonzero(c.labels))
                    if not table_globals <= labeled:
                        raise RunModeError(
                            f"layer {c.layer}: table has entries for channels "
                            f"not labeled global"
                        )


VANILLA = RunMode("vanilla")


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    return x * scale * weight


def causal_conv(u: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Depthwise causal convolution over time, zero left padding.

    u: (L, d_e); weight: (d_e, K) with tap K-1 on the current token.
    """
    L, d_e = u.shape
    k = weight.shape[1]
    padded = np.vstack([np.zeros((k - 1, d_e), dtype=u.dtype), u])
    out = np.broadcast_to(bias, (L, d_e)).astype(u.dtype).copy()
    for tap in range(k):
        out += padded[tap : tap + L] * weight[:, tap]
    return out


def _delta_of(x: np.ndarray, lw: LayerWeights) -> np.ndarray:
    if lw.delta_down is None:
        return softplus(x)
    pre = (x @ lw.delta_down.T) @ lw.delta_up.T + lw.delta_bias
    return softplus(pre)


def _block_ssm_inputs(block_in: np.ndarray, lw: LayerWeights, d_state: int):
    u = block_in @ lw.in_proj.T
    x = silu(causal_conv(u, lw.conv_weight, lw.conv_bias))
    delta = _delta_of(x, lw)
    bc = x @ lw.bc_proj.T
    inputs = SsmInputs(x=x, delta=delta, b=bc[:, :d_state], c=bc[:, d_state:])
    return inputs, u


def block_forward(
    block_in: np.ndarray,
    lw: LayerWeights,
    d_state: int,
    policy: FilterPolicy | None = None,
) -> np.ndarray:
    """One block, no norm or residual; returns (L, d_m)."""
    inputs, _ = _block_ssm_inputs(block_in, lw, d_state)
    if policy is None:
        y, _ = selective_scan(inputs, lw.a)
    else:
        y, _ = filtered_scan(inputs, lw.a, policy=policy)
    gate = silu(block_in @ lw.gate_proj.T)
    return (gate * (y + lw.d * inputs.x)) @ lw.out_proj.T


def layer_policies(bundle: ModelBundle, mode: RunMode | None, seq_len: int) -> list[FilterPolicy | None]:
    """Per-layer filter policies for a given input length (None = no filtering)."""
    if mode is None or mode.variant == "vanilla":
        return [None] * bundle.config.n_layers
    d_e = bundle.config.d_inner
    by_layer = ch_mod.lookup(mode.table, seq_len)
    policies: list[FilterPolicy | None] = []
    for i in range(bundle.config.n_layers):
        row = by_layer.get(i)
        if not row:
            policies.append(None)
            continue
        mask = np.zeros(d_e, dtype=bool)
        thresholds = np.zeros(d_e)
        for ch, g in row.items():
            mask[ch] = True
            thresholds[ch] = g
        policies.append(FilterPolicy(global_mask=mask, thresholds=thresholds))
    return policies


def _embed(bundle: ModelBundle, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and int(tokens.max()) >= bundle.config.vocab_size:
        raise ValueError(
            f"token id {int(tokens.max())} >= vocab_size {bundle.config.vocab_size}"
        )
    return bundle.embedding[tokens].astype(np.float32)


def _stack(bundle: ModelBundle, tokens, mode: RunMode | None, capture: list | None):
    tokens = np.asarray(tokens)
    policies = layer_policies(bundle, mode, len(tokens))
    h = _embed(bundle, tokens)
    d_s = bundle.config.d_state
    for lw, policy in zip(bundle.layers, policies):
        block_in = rms_norm(h, lw.norm)
        inputs, _ = _block_ssm_inputs(block_in, lw, d_s)
        if capture is not None:
            capture.append(inputs)
        scan = selective_scan if policy is None else (
            lambda ins, a: filtered_scan(ins, a, policy=policy)
        )
        y, _ = scan(inputs, lw.a)
        gate = silu(block_in @ lw.gate_proj.T)
        h = h + (gate * (y + lw.d * inputs.x)) @ lw.out_proj.T
    h = rms_norm(h, bundle.final_norm)
    return h @ bundle.lm_head.T


def forward(bundle: ModelBundle, tokens, mode: RunMode | None = None) -> np.ndarray:
    """Logits of shape (L, vocab) for a token-id sequence."""
    return _stack(bundle, tokens, mode, capture=None)


def trace_ssm_inputs(bundle: ModelBundle, tokens, mode: RunMode | None = None):
    """Forward pass that also returns each layer's scan inputs (X, Delta, B, C)."""
    capture: list[SsmInputs] = []
    logits = _stack(bundle, tokens, mode, capture=capture)
    return logits, capture


@dataclass
class _LayerState:
    conv_tail: np.ndarray  # (K-1, d_e) most recent pre-conv activations
    hidden: np.ndarray     # (d_s, d_e)


@dataclass
class DecodeSession:
    """Single-sequence recurrent decoding state (conv tails + hidden states)."""

    bundle: ModelBundle
    mode: RunMode | None = None
    length: int = 0
    states: list[_LayerState] = field(default_factory=list)

    def __post_init__(self):
        c = self.bundle.config
        if not self.states:
            self.states = [
                _LayerState(
                    conv_tail=np.zeros((c.conv_kernel - 1, c.d_inner), dtype=np.float32),
                    hidden=np.zeros((c.d_state, c.d_inner), dtype=np.float32),
                )
                for _ in range(c.n_layers)
            ]

    def prefill(self, tokens) -> np.ndarray:
        """Consume a prompt with batch scans; returns logits of the last position."""
        tokens = np.asarray(tokens)
        c = self.bundle.config
        policies = layer_policies(self.bundle, self.mode, len(tokens))
        h = _embed(self.bundle, tokens)
        for lw, st, policy in zip(self.bundle.layers, self.states, policies):
            block_in = rms_norm(h, lw.norm)
            inputs, u = _block_ssm_inputs(block_in, lw, c.d_state)
            y, h_final = (
                selective_scan(inputs, lw.a)
                if policy is None
                else filtered_scan(inputs, lw.a, policy=policy)
            )
            st.hidden = h_final
            tail = np.vstack([st.conv_tail, u])[-(c.conv_kernel - 1) :] if c.conv_kernel > 1 else st.conv_tail
            st.conv_tail = tail.astype(np.float32)
            gate = silu(block_in @ lw.gate_proj.T)
            h = h + (gate * (y + lw.d * inputs.x)) @ lw.out_proj.T
        self.length += len(tokens)
        h = rms_norm(h, self.bundle.final_norm)
        return (h[-1] @ self.bundle.lm_head.T).astype(np.float32)

    def step(self, token: int) -> np.ndarray:
        """Consume one token; returns its logits row."""
        c = self.bundle.config
        policies = layer_policies(self.bundle, self.mode, self.length + 1)
        h = _embed(self.bundle, np.array([token]))[0]
        for lw, st, policy in zip(self.bundle.layers, self.states, policies):
            block_in = rms_norm(h, lw.norm)
            u = block_in @ lw.in_proj.T
            window = np.vstack([st.conv_tail, u[None, :]]) if c.conv_kernel > 1 else u[None, :]
            conv = (window * lw.conv_weight.T).sum(axis=0) + lw.conv_bias
            x = silu(conv)
            delta = _delta_of(x[None, :], lw)[0]
            bc = x @ lw.bc_proj.T
            y, st.hidden = scan_step(
                st.hidden, x, delta, bc[: c.d_state], bc[c.d_state :], lw.a, policy=policy
            )
            if c.conv_kernel > 1:
                st.conv_tail = window[1:].astype(np.float32)
            gate = silu(block_in @ lw.gate_proj.T)
            h = h + (gate * (y + lw.d * x)) @ lw.out_proj.T
        self.length += 1
        h = rms_norm(h, self.bundle.final_norm)
        return (h @ self.bundle.lm_head.T).astype(np.float32)


def generate_greedy(bundle: ModelBundle, prompt, n_new: int, mode: RunMode | None = None) -> np.ndarray:
    """Greedy decoding; ties pick the smallest token id. Returns prompt + new ids."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if n_new == 0:
        return prompt.copy()
    session = DecodeSession(bundle=bundle, mode=mode)
    logits = session.prefill(prompt)
    out = list(prompt)
    for _ in range(n_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits = session.step(nxt)
    return np.asarray(out, dtype=np.int64)

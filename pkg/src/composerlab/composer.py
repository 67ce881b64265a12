"""The meta-generator that turns a prompt into per-target low-rank updates.

Sequence layout: a prompt block of ``m`` tokens, then one component block
per adaptation target holding ``r`` A-tokens followed by ``r`` B-tokens (and
one gamma token in quant mode).  Component tokens start from a token bank
that is either projected from the backbone weight on every call, stored
after freezing, or learned directly.  A learned positional entry is added to
every token, a small pre-norm transformer runs under a structured attention
mask, and two linear heads read A columns and B rows back out.

Attention mask rules (query ``q`` sees key ``k`` iff any holds):

* (i)   both are prompt tokens;
* (ii)  ``q`` is a component token and ``k`` a prompt token;
* (iii) both are component tokens of the same block;
* (iv)  both are the first token of their block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backbone import Denoiser, DenoiserConfig, Target, UpdateSet, collect_adaptation_targets, weight_name
from .composition import GenerationCounters, LowRankUpdate
from .errors import ConfigError, ContractError, DataError, DimensionError, StateError
from .numerics import SeededRng, Tensor, ops

ATTENTION_VARIANTS = ("global_local", "global_local_wide", "standard")
ARCHS = ("transformer", "mlp")
TOKEN_INITS = ("projected", "constant")
HEAD_INITS = ("lora", "zero")
PROJECTORS = ("factored", "dense")

# softplus(_GAMMA_BIAS) == 1, so an untrained gamma head leaves activations unscaled
_GAMMA_BIAS = math.log(math.e - 1.0)

# candidate clipping points, as fractions of max |w|, for composer weight grids
CLIP_RATIOS = np.linspace(0.1, 1.0, 19)


def mse_scale(w: np.ndarray, bits: int) -> float:
    """Per-tensor grid step minimizing the squared rounding error of ``w``.

    Searches clipping points ``c * max|w|`` over :data:`CLIP_RATIOS`; ``c = 1``
    is the max-abs scale.  Returns 0 for an all-zero tensor.
    """
    top = float(np.max(np.abs(w)))
    if top == 0.0:
        return 0.0
    qmax = ops.quant_levels(bits)
    steps = CLIP_RATIOS * (top / qmax)
    x = w.reshape(1, -1).astype(np.float64)
    q = np.clip(np.rint(x / steps[:, None]), -qmax, qmax) * steps[:, None]
    return float(steps[np.argmin(((q - x) ** 2).sum(axis=1))])


@dataclass(frozen=True)
class ComposerConfig:
    r: int = 8
    d_model: int = 64
    L: int = 2
    heads: int = 4
    m: int = 1
    targets: tuple[str, ...] = ("Q", "V")
    attention: str = "global_local"
    arch: str = "transformer"
    token_init: str = "projected"
    head_init: str = "lora"
    projector: str = "factored"
    quant: bool = False

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError("composer.r must be >= 1")
        if self.d_model < 1 or self.d_model % self.heads:
            raise ConfigError("composer.d_model must be divisible by composer.heads")
        if self.L < 1 or self.m < 1:
            raise ConfigError("composer.L and composer.m must be >= 1")
        for name, value, allowed in (
            ("composer.attention", self.attention, ATTENTION_VARIANTS),
            ("composer.arch", self.arch, ARCHS),
            ("composer.token_init", self.token_init, TOKEN_INITS),
            ("composer.head_init", self.head_init, HEAD_INITS),
            ("composer.projector", self.projector, PROJECTORS),
        ):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")


# -- layout and mask -------------------------------------------------------------


@dataclass(frozen=True)
class TokenSlot:
    block: int
    offset: int
    role: str  # "prompt", "A", "B" or "gamma"


@dataclass
class SequenceLayout:
    """Token bookkeeping; block 0 is the prompt block."""

    m: int
    r: int
    targets: list
    gamma: bool = False
    slots: list[TokenSlot] = field(default_factory=list)

    def __post_init__(self):
        if not self.slots:
            self.slots = [TokenSlot(0, i, "prompt") for i in range(self.m)]
            for j, _ in enumerate(self.targets):
                roles = ["A"] * self.r + ["B"] * self.r + (["gamma"] if self.gamma else [])
                self.slots.extend(TokenSlot(j + 1, i, role) for i, role in enumerate(roles))

    @property
    def block_len(self) -> int:
        return 2 * self.r + (1 if self.gamma else 0)

    @property
    def length(self) -> int:
        return len(self.slots)

    @property
    def num_blocks(self) -> int:
        return 1 + len(self.targets)

    def block_start(self, j: int) -> int:
        """Index of the first token of component block ``j`` (0-based target index)."""
        return self.m + j * self.block_len

    def roles(self) -> list[str]:
        return [s.role for s in self.slots]


def build_mask(layout: SequenceLayout, variant: str = "global_local") -> np.ndarray:
    """Boolean ``(L, L)`` mask; ``mask[q, k]`` means query ``q`` may read key ``k``."""
    if variant not in ATTENTION_VARIANTS:
        raise ConfigError(f"unknown attention variant {variant!r}")
    n = layout.length
    if variant == "standard":
        return np.ones((n, n), dtype=bool)
    block = np.array([s.block for s in layout.slots])
    first = np.array([s.offset == 0 and s.block > 0 for s in layout.slots])
    prompt = block == 0
    comp = ~prompt
    mask = prompt[:, None] & prompt[None, :]  # (i)
    mask |= comp[:, None] & prompt[None, :]  # (ii)
    mask |= comp[:, None] & comp[None, :] & (block[:, None] == block[None, :])  # (iii)
    if variant == "global_local":
        mask |= first[:, None] & first[None, :]  # (iv)
    else:
        mask |= first[:, None] & comp[None, :]
    return mask


# -- parameters ------------------------------------------------------------------


def _tname(target: Target) -> str:
    return f"{target[0]}.{target[1]}"


def init_composer_params(
    cfg: ComposerConfig, bcfg: DenoiserConfig, rng: SeededRng, dtype=np.float32
) -> dict[str, np.ndarray]:
    targets = collect_adaptation_targets(bcfg, cfg.targets)
    d, dm, r = bcfg.d, cfg.d_model, cfg.r
    layout = SequenceLayout(cfg.m, r, targets, gamma=cfg.quant)

    def normal(shape, scale):
        return rng.normal(shape, scale=scale, dtype=dtype)

    p: dict[str, np.ndarray] = {
        "prompt.emb": normal((bcfg.num_classes, cfg.m, dm), 1.0),
        "pos": normal((layout.length, dm), 0.02),
    }
    for tgt in targets:
        tn = _tname(tgt)
        if cfg.token_init == "constant":
            p[f"bank.{tn}"] = normal((2 * r, dm), 1.0)
        elif cfg.projector == "factored":
            # tokens = U W V + b; each entry is a fixed linear functional of W
            p[f"proj.{tn}.U"] = normal((2 * r, d), d**-0.25)
            p[f"proj.{tn}.V"] = normal((d, dm), d**-0.25)
            p[f"proj.{tn}.b"] = np.zeros((2 * r, dm), dtype)
        else:
            p[f"proj.{tn}.P"] = normal((d * d, 2 * r * dm), 1.0 / d)
            p[f"proj.{tn}.b"] = np.zeros((2 * r, dm), dtype)
        if cfg.quant:
            p[f"gamma0.{tn}"] = normal((dm,), 1.0)
    hidden = 4 * dm
    if cfg.arch == "transformer":
        for i in range(cfg.L):
            pre = f"enc.{i}"
            p[f"{pre}.ln1.g"] = np.ones(dm, dtype)
            p[f"{pre}.ln1.b"] = np.zeros(dm, dtype)
            for k in ("q", "k", "v"):
                p[f"{pre}.attn.{k}"] = normal((dm, dm), dm**-0.5)
            p[f"{pre}.attn.o"] = normal((dm, dm), 0.5 * dm**-0.5)
            p[f"{pre}.ln2.g"] = np.ones(dm, dtype)
            p[f"{pre}.ln2.b"] = np.zeros(dm, dtype)
            p[f"{pre}.ff1.w"] = normal((hidden, dm), dm**-0.5)
            p[f"{pre}.ff1.b"] = np.zeros(hidden, dtype)
            p[f"{pre}.ff2.w"] = normal((dm, hidden), 0.5 * hidden**-0.5)
            p[f"{pre}.ff2.b"] = np.zeros(dm, dtype)
    else:
        p["mlp.1.w"] = normal((hidden, 2 * dm), (2 * dm) ** -0.5)
        p["mlp.1.b"] = np.zeros(hidden, dtype)
        p["mlp.2.w"] = normal((dm, hidden), hidden**-0.5)
        p["mlp.2.b"] = np.zeros(dm, dtype)
    p["enc.out.g"] = np.ones(dm, dtype)
    p["enc.out.b"] = np.zeros(dm, dtype)
    p["head.A.w"] = np.zeros((d, dm), dtype)
    p["head.A.b"] = np.zeros(d, dtype)
    if cfg.head_init == "zero":
        p["head.B.w"] = np.zeros((d, dm), dtype)
    else:
        p["head.B.w"] = normal((d, dm), 1.0 / math.sqrt(d * dm))
    p["head.B.b"] = np.zeros(d, dtype)
    if cfg.quant:
        p["head.gamma.w"] = np.zeros((1, dm), dtype)
        bias = 0.0 if cfg.head_init == "zero" else _GAMMA_BIAS
        p["head.gamma.b"] = np.full(1, bias, dtype)
    return p


# -- the composer ----------------------------------------------------------------


class Composer:
    """Parameters, token-bank state and the generation pipeline.

    ``bank_mode`` is ``"projected"`` while the projector is live, ``"frozen"``
    after :meth:`freeze_token_bank`, and ``"constant"`` for learned tokens.
    """

    def __init__(
        self,
        config: ComposerConfig,
        backbone_config: DenoiserConfig,
        params: dict[str, Tensor],
        bank_mode: Optional[str] = None,
    ):
        self.config = config
        self.backbone_config = backbone_config
        self.targets: list[Target] = collect_adaptation_targets(backbone_config, config.targets)
        self.layout = SequenceLayout(config.m, config.r, self.targets, gamma=config.quant)
        self.mask = build_mask(self.layout, config.attention)
        self.params = params
        if bank_mode is None:
            bank_mode = "constant" if config.token_init == "constant" else "projected"
        self.bank_mode = bank_mode
        self.weight_bits: Optional[int] = None
        self._check_params()

    @classmethod
    def init(cls, config: ComposerConfig, backbone_config: DenoiserConfig, rng: SeededRng, dtype=np.float32):
        raw = init_composer_params(config, backbone_config, rng, dtype)
        return cls(config, backbone_config, {k: Tensor(v, dtype=dtype) for k, v in raw.items()})

    def _check_params(self) -> None:
        if self.config.quant:
            for tgt in self.targets:
                if f"gamma0.{_tname(tgt)}" not in self.params:
                    raise ConfigError(f"quant mode needs a gamma seed token for target {tgt}")

    @property
    def dtype(self):
        return self.params["head.A.w"].dtype

    def trainable_names(self) -> list[str]:
        return sorted(self.params)

    def set_trainable(self, flag: bool) -> None:
        self.params = {k: Tensor._wrap(v.data, flag) for k, v in self.params.items()}

    def with_params(self, params: dict[str, Tensor]) -> "Composer":
        out = Composer(self.config, self.backbone_config, dict(params), self.bank_mode)
        out.weight_bits = self.weight_bits
        return out

    def nbytes(self) -> int:
        return sum(v.data.nbytes for v in self.params.values())

    # -- parameter access, optionally fake-quantized ------------------------------
    def _w(self, name: str) -> Tensor:
        p = self.params[name]
        if self.weight_bits is None or p.ndim < 2:
            return p
        s = mse_scale(p.data, self.weight_bits)
        if s == 0.0:
            return p
        return ops.fake_quantize(p, self.weight_bits, s)

    # -- token bank ----------------------------------------------------------------
    def project_weights(self, W: Tensor, target: Target) -> tuple[Tensor, Tensor]:
        """``(A0, B0)`` tokens, each ``(r, d_model)``, from a ``d x d`` weight."""
        if self.bank_mode != "projected":
            raise StateError(f"projector is not live (bank mode {self.bank_mode!r})")
        d, r, dm = self.backbone_config.d, self.config.r, self.config.d_model
        if W.shape != (d, d):
            raise ConfigError(f"projector expects a {d}x{d} weight, got {W.shape}")
        tn = _tname(target)
        if self.config.projector == "factored":
            tokens = ops.matmul(ops.matmul(self._w(f"proj.{tn}.U"), W), self._w(f"proj.{tn}.V"))
        else:
            flat = ops.reshape(W, (1, d * d))
            tokens = ops.reshape(ops.matmul(flat, self._w(f"proj.{tn}.P")), (2 * r, dm))
        tokens = ops.add(tokens, self.params[f"proj.{tn}.b"])
        return ops.getitem(tokens, slice(0, r)), ops.getitem(tokens, slice(r, 2 * r))

    def bank_tokens(self, backbone: Optional[Denoiser]) -> list[Tensor]:
        """Per target, the ``(2r, d_model)`` seed tokens (A0 rows then B0 rows)."""
        out = []
        for tgt in self.targets:
            tn = _tname(tgt)
            if self.bank_mode == "projected":
                if backbone is None:
                    raise StateError("projected token bank needs the backbone weights")
                a0, b0 = self.project_weights(backbone.params[weight_name(tgt)], tgt)
                out.append(ops.concat([a0, b0], axis=0))
            else:
                out.append(self.params[f"bank.{tn}"])
        return out

    def freeze_token_bank(self, backbone: Denoiser) -> "Composer":
        """Store the projected tokens as constants and drop the projector."""
        if self.bank_mode == "frozen":
            raise StateError("token bank is already frozen")
        if self.bank_mode != "projected":
            raise StateError(f"cannot freeze a {self.bank_mode!r} token bank")
        from .numerics import no_tape

        with no_tape():
            tokens = self.bank_tokens(backbone)
        params = {k: v for k, v in self.params.items() if not k.startswith("proj.")}
        for tgt, tok in zip(self.targets, tokens):
            params[f"bank.{_tname(tgt)}"] = Tensor._wrap(tok.data.copy())
        out = Composer(self.config, self.backbone_config, params, bank_mode="frozen")
        out.weight_bits = self.weight_bits
        return out

    # -- prompt --------------------------------------------------------------------
    def prompt_encode(self, class_ids) -> Tensor:
        """``(B, m, d_model)`` prompt tokens for integer class ids."""
        cls = np.atleast_1d(np.asarray(class_ids))
        if cls.dtype.kind not in "iu":
            raise DataError(f"class ids must be integers, got {cls.dtype}")
        C = self.backbone_config.num_classes
        if np.any(cls < 0) or np.any(cls >= C):
            raise DataError(f"class id out of range [0, {C}): {cls}")
        return ops.getitem(self.params["prompt.emb"], cls.astype(np.int64))

    # -- sequence assembly and encoder -------------------------------------------------
    def assemble(self, prompt: Tensor, bank: Sequence[Tensor]) -> Tensor:
        """``(B, L, d_model)`` token sequence with positional entries added."""
        b = prompt.shape[0]
        dm = self.config.d_model
        blocks = []
        for j, tok in enumerate(bank):
            if self.config.quant:
                g0 = ops.reshape(self.params[f"gamma0.{_tname(self.targets[j])}"], (1, dm))
                tok = ops.concat([tok, g0], axis=0)
            blocks.append(tok)
        comp = ops.concat(blocks, axis=0)
        comp = ops.broadcast_to(ops.reshape(comp, (1,) + comp.shape), (b,) + comp.shape)
        seq = ops.concat([prompt, comp], axis=1)
        if seq.shape[1] != self.layout.length:
            raise ContractError(f"sequence length {seq.shape[1]} != layout length {self.layout.length}")
        return ops.add(seq, self.params["pos"])

    def encode(self, seq: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """Pre-norm transformer encoder; ``mask`` defaults to the layout mask."""
        cfg = self.config
        mask = self.mask if mask is None else mask
        n = seq.shape[1]
        if mask.shape != (n, n):
            raise DimensionError(f"mask shape {mask.shape} does not match sequence length {n}")
        h = seq
        for i in range(cfg.L):
            h = self._encoder_layer(h, i, mask)
        return ops.layer_norm(h, self.params["enc.out.g"], self.params["enc.out.b"])

    def _encoder_layer(self, h: Tensor, i: int, mask: np.ndarray) -> Tensor:
        P = self.params
        b, n = h.shape[:2]
        dm, H = self.config.d_model, self.config.heads
        dh = dm // H
        pre = f"enc.{i}"
        a = ops.layer_norm(h, P[pre + ".ln1.g"], P[pre + ".ln1.b"])
        q = ops.transpose(ops.reshape(ops.linear(a, self._w(pre + ".attn.q")), (b, n, H, dh)), (0, 2, 1, 3))
        k = ops.transpose(ops.reshape(ops.linear(a, self._w(pre + ".attn.k")), (b, n, H, dh)), (0, 2, 1, 3))
        v = ops.transpose(ops.reshape(ops.linear(a, self._w(pre + ".attn.v")), (b, n, H, dh)), (0, 2, 1, 3))
        del a
        att = ops.attention(q, k, v, mask, 1.0 / math.sqrt(dh))
        del q, k, v
        o = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (b, n, dm))
        del att
        h = ops.add(h, ops.linear(o, self._w(pre + ".attn.o")))
        del o
        f = ops.layer_norm(h, P[pre + ".ln2.g"], P[pre + ".ln2.b"])
        f = ops.gelu(ops.linear(f, self._w(pre + ".ff1.w"), P[pre + ".ff1.b"]))
        return ops.add(h, ops.linear(f, self._w(pre + ".ff2.w"), P[pre + ".ff2.b"]))

    def _mlp(self, seq: Tensor) -> Tensor:
        """Per-token two-layer perceptron on ``[token, pooled prompt]``."""
        P = self.params
        m = self.config.m
        prompt = ops.mean(ops.getitem(seq, (slice(None), slice(0, m))), axis=1, keepdims=True)
        prompt = ops.broadcast_to(prompt, seq.shape)
        x = ops.concat([seq, prompt], axis=-1)
        x = ops.gelu(ops.linear(x, self._w("mlp.1.w"), P["mlp.1.b"]))
        h = ops.add(seq, ops.linear(x, self._w("mlp.2.w"), P["mlp.2.b"]))
        return ops.layer_norm(h, P["enc.out.g"], P["enc.out.b"])

    # -- extraction ----------------------------------------------------------------
    def extract_updates(self, out: Tensor) -> tuple[UpdateSet, Optional[dict]]:
        """Read ``A`` columns and ``B`` rows (and gamma) from encoder outputs."""
        lay = self.layout
        if out.ndim != 3 or out.shape[1] != lay.length:
            raise ContractError(f"encoder output {out.shape} does not match layout length {lay.length}")
        P = self.params
        r = self.config.r
        updates: UpdateSet = {}
        gammas = {} if self.config.quant else None
        for j, tgt in enumerate(self.targets):
            s = lay.block_start(j)
            za = ops.getitem(out, (slice(None), slice(s, s + r)))
            zb = ops.getitem(out, (slice(None), slice(s + r, s + 2 * r)))
            rows_a = ops.linear(za, self._w("head.A.w"), P["head.A.b"])  # (B, r, d)
            B = ops.linear(zb, self._w("head.B.w"), P["head.B.b"])  # (B, r, d)
            A = ops.swapaxes(rows_a, -1, -2)  # token i -> column i
            updates[tgt] = LowRankUpdate(A, B)
            if gammas is not None:
                zg = ops.getitem(out, (slice(None), s + 2 * r))
                g = ops.softplus(ops.linear(zg, self._w("head.gamma.w"), P["head.gamma.b"]))
                gammas[tgt] = ops.reshape(g, (out.shape[0],))
        return updates, gammas

    # -- full pipeline ---------------------------------------------------------------
    def _generate_unique(self, classes: np.ndarray, backbone: Optional[Denoiser]):
        prompt = self.prompt_encode(classes)
        seq = self.assemble(prompt, self.bank_tokens(backbone))
        out = self.encode(seq) if self.config.arch == "transformer" else self._mlp(seq)
        return self.extract_updates(out)

    def generate(
        self,
        class_ids,
        backbone: Optional[Denoiser] = None,
        counters: Optional[GenerationCounters] = None,
    ) -> UpdateSet:
        """Per-instance updates with leading batch axis ``(B, d, r)`` / ``(B, r, d)``.

        Instances sharing a prompt share one encoder pass.
        """
        return self.generate_with_gamma(class_ids, backbone, counters)[0]

    def generate_with_gamma(self, class_ids, backbone=None, counters=None):
        cls = np.atleast_1d(np.asarray(class_ids))
        uniq, inverse = np.unique(cls, return_inverse=True)
        updates, gammas = self._generate_unique(uniq, backbone)
        if counters is not None:
            counters.composer_calls += 1
        if len(uniq) == len(cls) and np.array_equal(uniq, cls):
            return updates, gammas
        idx = inverse.reshape(-1)
        updates = {
            k: LowRankUpdate(ops.getitem(u.A, idx), ops.getitem(u.B, idx)) for k, u in updates.items()
        }
        if gammas is not None:
            gammas = {k: ops.getitem(g, idx) for k, g in gammas.items()}
        return updates, gammas

    def generate_single(self, class_id: int, backbone=None, counters=None) -> UpdateSet:
        """Shared (unbatched) update set for one prompt, ready to merge."""
        ups, _ = self.generate_single_with_gamma(class_id, backbone, counters)
        return ups

    def generate_single_with_gamma(self, class_id: int, backbone=None, counters=None):
        ups, gammas = self.generate_with_gamma([int(class_id)], backbone, counters)
        ups = {k: LowRankUpdate(ops.getitem(u.A, 0), ops.getitem(u.B, 0)) for k, u in ups.items()}
        if gammas is not None:
            gammas = {k: ops.getitem(g, 0) for k, g in gammas.items()}
        return ups, gammas

"""Model assembly for the four families and the shared multi-task wrapper.

* RTM  - truncated residual encoder -> spatial tokens -> per-task attention
* RTMG - RTM plus a global Gram branch; heads attend over Gram rows
         (``rtmg_mode="concat"`` also attends over spatial tokens)
* PM   - PatchGAN trunk -> per-task spatial attention
* PMG  - PatchGAN trunk -> 1x1 projection -> local Grams -> style tokens
         -> refiner -> task-conditioned pooling

``use_attention=False`` swaps each family's attention for uniform pooling
(the GAP ablation).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data.taxonomy import Taxonomy
from .errors import ConfigError, DimensionError, HeadDisabledError, UnsupportedVariantError
from .heads import (Classifier, ConditionedPool, DualAggregator, GapPool, PatchSpatialAttention,
                    SpatialTaskAttention, TaskHead, TokenRefiner)
from .layers import Linear, ReLU, Sequential, Sigmoid
from .style import ChannelProjection, GlobalGram, LocalGramTokens, TokenProjection
from .tensor import Module
from .vision import EncoderConfig, build_patchgan_trunk, build_truncated_encoder, check_input

FAMILIES = ("PM", "PMG", "RTM", "RTMG")


@dataclass
class ModelConfig:
    family: str = "PMG"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    input_size: int = 64
    use_attention: bool = True
    # PMG
    patch_div: int = 4
    gram_channels: int = 8
    d_model: int = 64
    refiner_layers: int = 1
    refiner_heads: int = 4
    ff_dim: int | None = None
    positional: bool = False
    use_token_attention: bool = True
    use_channel_attention: bool = False
    # RTM / RTMG
    attn_dim: int = 32
    gram_matrix_size: int = 16
    rtmg_mode: str = "sequential"
    hidden_dims: int = 0
    num_layers: int = 0
    # PM attention options
    attn_tau: float = 1.0
    attn_use_se: bool = False
    attn_softmax_spatial: bool = True
    attn_tv_lambda: float = 0.0
    # loss
    loss: str = "weighted_ce"
    focal_gamma: float = 2.0
    weight_mode: str = "median"
    weight_cap: float = 10.0
    taxonomy: Taxonomy | None = None
    seed: int = 0

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        want = "patchgan" if self.family in ("PM", "PMG") else "residual"
        if self.encoder.family != want:
            raise ConfigError(f"{self.family} needs a {want} encoder, got {self.encoder.family!r}")
        self.encoder.validate()
        if self.taxonomy is None or len(self.taxonomy) == 0:
            raise ConfigError("model config needs a taxonomy with at least one task")
        if self.loss not in ("weighted_ce", "focal"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.rtmg_mode not in ("sequential", "concat"):
            raise ConfigError(f"unknown rtmg_mode {self.rtmg_mode!r}")
        if self.num_layers and self.hidden_dims < 1:
            raise ConfigError("num_layers > 0 needs hidden_dims >= 1")
        for name in ("patch_div", "gram_channels", "d_model", "attn_dim", "gram_matrix_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["taxonomy"] = self.taxonomy.to_dict() if self.taxonomy is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        d["taxonomy"] = Taxonomy.from_dict(d["taxonomy"]) if d.get("taxonomy") else None
        return cls(**d)


class ChannelGate(Module):
    """Squeeze-excitation over a B x C x H x W map: F * sigmoid(MLP(GAP(F)))."""

    def __init__(self, channels, rng, reduction=4):
        hidden = max(1, channels // reduction)
        self.mlp = Sequential(Linear(channels, hidden, rng=rng), ReLU(),
                              Linear(hidden, channels, rng=rng, init="xavier"), Sigmoid())

    def forward(self, F):
        gate = self.mlp(F.mean(axis=(2, 3)))
        self._cache = (F, gate)
        return F * gate[:, :, None, None]

    def backward(self, dy):
        F, gate = self._cache
        self._cache = None
        dgate = (dy * F).sum(axis=(2, 3))
        dm = self.mlp.backward(dgate)
        return dy * gate[:, :, None, None] + dm[:, :, None, None] / (F.shape[2] * F.shape[3])


def _to_tokens(F):
    b, c, h, w = F.shape
    return F.reshape(b, c, h * w).transpose(0, 2, 1)


def _from_tokens(dT, shape):
    return dT.transpose(0, 2, 1).reshape(shape)


class MultiTaskModel(Module):
    """Shared style trunk plus one independently switchable head per task."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.taxonomy = cfg.taxonomy
        fam = cfg.family
        self.gate = self.projection = self.gram = self.local = self.tokens = self.refiner = None
        if fam in ("PM", "PMG"):
            self.encoder = build_patchgan_trunk(cfg.encoder, rng)
        else:
            self.encoder = build_truncated_encoder(cfg.encoder, rng)
        c = self.encoder.out_channels
        self.map_hw = self.encoder.output_hw((cfg.input_size, cfg.input_size))
        h, w = self.map_hw

        if fam == "PMG":
            if h % cfg.patch_div or w % cfg.patch_div:
                raise ConfigError(f"patch_div={cfg.patch_div} does not divide the {h}x{w} trunk output")
            if cfg.use_channel_attention:
                self.gate = ChannelGate(c, rng)
            self.projection = ChannelProjection(c, cfg.gram_channels, rng)
            self.local = LocalGramTokens(cfg.patch_div)
            self.tokens = TokenProjection(cfg.gram_channels, cfg.d_model, rng)
            if cfg.use_token_attention and cfg.refiner_layers > 0:
                self.refiner = TokenRefiner(cfg.d_model, cfg.refiner_layers, cfg.refiner_heads, cfg.ff_dim,
                                            cfg.patch_div ** 2, cfg.positional, rng)
        elif fam == "RTMG":
            self.projection = ChannelProjection(c, cfg.gram_matrix_size, rng)
            self.gram = GlobalGram()

        self.heads = {}
        for task in self.taxonomy.tasks:
            agg, variant = self._aggregator(c, rng)
            clf = Classifier(agg.out_dim, task.n_classes, rng, cfg.hidden_dims if fam in ("RTM", "RTMG") else 0,
                             cfg.num_layers if fam in ("RTM", "RTMG") else 0)
            self.heads[task.name] = TaskHead(task.name, variant, agg, clf)

    def _aggregator(self, c, rng):
        cfg, fam = self.cfg, self.cfg.family
        if fam == "PMG":
            if cfg.use_attention:
                return ConditionedPool(cfg.d_model, rng), "conditioned_pool"
            return GapPool(cfg.d_model), "gap"
        if fam == "PM":
            if cfg.use_attention:
                return PatchSpatialAttention(c, self.map_hw, rng, cfg.attn_tau, cfg.attn_use_se,
                                             cfg.attn_softmax_spatial, cfg.attn_tv_lambda), "spatial_attention"
            return GapPool(c), "gap"
        if fam == "RTM":
            if cfg.use_attention:
                return SpatialTaskAttention(c, cfg.attn_dim, rng), "spatial_attention"
            return GapPool(c), "gap"
        g = cfg.gram_matrix_size
        if cfg.rtmg_mode == "concat":
            if cfg.use_attention:
                return DualAggregator(SpatialTaskAttention(c, cfg.attn_dim, rng),
                                      SpatialTaskAttention(g, cfg.attn_dim, rng)), "spatial_attention"
            return DualAggregator(GapPool(c), GapPool(g)), "gap"
        if cfg.use_attention:
            return SpatialTaskAttention(g, cfg.attn_dim, rng), "spatial_attention"
        return GapPool(g), "gap"

    # ------------------------------------------------------------------
    # head control

    @property
    def task_names(self):
        return list(self.heads)

    def set_head_enabled(self, task, flag):
        if task not in self.heads:
            raise ConfigError(f"unknown task {task!r}")
        self.heads[task].enabled = bool(flag)
        return self

    def enabled_tasks(self):
        return [t for t, h in self.heads.items() if h.enabled]

    # ------------------------------------------------------------------
    # forward / backward

    def features(self, x):
        """Shared trunk output consumed (read-only) by every head."""
        x = np.asarray(x, dtype=self.dtype)
        check_input(x, self.cfg.encoder.in_channels)
        if x.shape[2:] != (self.cfg.input_size, self.cfg.input_size):
            raise DimensionError(f"model built for {self.cfg.input_size}x{self.cfg.input_size} inputs, "
                                 f"got {x.shape[2]}x{x.shape[3]}")
        F = self.encoder(x)
        self._fshape = F.shape
        fam = self.cfg.family
        if fam in ("PM", "RTM"):
            return _to_tokens(F)
        if fam == "RTMG":
            G = self.gram(self.projection(F))
            return (_to_tokens(F), G) if self.cfg.rtmg_mode == "concat" else G
        if self.gate is not None:
            F = self.gate(F)
        T = self.tokens(self.local(self.projection(F)))
        return self.refiner(T) if self.refiner is not None else T

    def forward(self, x, tasks=None):
        """Logits per requested enabled task (default: all enabled)."""
        if tasks is None:
            tasks = self.enabled_tasks()
        else:
            for t in tasks:
                if t not in self.heads:
                    raise ConfigError(f"unknown task {t!r}")
                if not self.heads[t].enabled:
                    raise HeadDisabledError(f"head {t!r} is disabled")
        if not tasks:
            raise HeadDisabledError("no enabled heads requested")
        feats = self.features(x)
        self._ran = list(tasks)
        return {t: self.heads[t](feats) for t in tasks}

    def backward(self, dlogits, frozen=()):
        """Backprop per-head logit gradients; heads' input gradients are summed.

        ``frozen`` may contain "encoder" and/or "attention"; frozen parts get
        no gradient and backprop stops at the first frozen stage.
        """
        frozen = set(frozen)
        dfeat = None
        for t, dl in dlogits.items():
            head = self.heads[t]
            dz = head.classifier.backward(dl)
            if "attention" in frozen:
                continue
            g = head.aggregator.backward(dz)
            if dfeat is None:
                dfeat = g
            elif isinstance(g, tuple):
                dfeat = tuple(a + b for a, b in zip(dfeat, g))
            else:
                dfeat = dfeat + g
        if dfeat is None:
            return None
        fam = self.cfg.family
        if fam == "PMG":
            if self.refiner is not None:
                if "attention" in frozen:
                    return None
                dfeat = self.refiner.backward(dfeat)
        if "encoder" in frozen:
            return None
        if fam in ("PM", "RTM"):
            dF = _from_tokens(dfeat, self._fshape)
        elif fam == "RTMG":
            if self.cfg.rtmg_mode == "concat":
                dT, dG = dfeat
                dF = _from_tokens(dT, self._fshape) + self.projection.backward(self.gram.backward(dG))
            else:
                dF = self.projection.backward(self.gram.backward(dfeat))
        else:
            dF = self.projection.backward(self.local.backward(self.tokens.backward(dfeat)))
            if self.gate is not None:
                dF = self.gate.backward(dF)
        return self.encoder.backward(dF)

    def penalty(self, tasks=None):
        tasks = self._ran if tasks is None else tasks
        return sum(self.heads[t].penalty for t in tasks)

    def predict(self, x, tasks=None, batch_size=32):
        """Argmax class per task, in eval mode, batched."""
        was = self.training
        self.eval()
        try:
            out = {}
            for i in range(0, len(x), batch_size):
                for t, lg in self.forward(x[i:i + batch_size], tasks).items():
                    out.setdefault(t, []).append(lg.argmax(axis=1))
            return {t: np.concatenate(v) for t, v in out.items()}
        finally:
            self.train(was)

    # ------------------------------------------------------------------
    # parameter groups

    def component_modules(self):
        """Modules per freeze/parameter group."""
        extraction = [m for m in (self.gate, self.projection, self.tokens) if m is not None]
        attention = ([self.refiner] if self.refiner is not None else []) + [h.aggregator for h in self.heads.values()]
        return {
            "encoder": [self.encoder],
            "extraction": extraction,
            "attention": attention,
            "classifiers": [h.classifier for h in self.heads.values()],
        }

    def freeze_groups(self, freeze):
        """Group names frozen by a freeze option (none | encoder | encoder+attention)."""
        if freeze in (None, "none"):
            return set()
        if freeze == "encoder":
            return {"encoder", "extraction"}
        if freeze == "encoder+attention":
            return {"encoder", "extraction", "attention"}
        raise ConfigError(f"unknown freeze option {freeze!r}")

    def parameter_counts(self):
        out = {k: sum(m.num_parameters() for m in mods) for k, mods in self.component_modules().items()}
        out["total"] = self.num_parameters()
        return out


def build_model(cfg: ModelConfig):
    return MultiTaskModel(cfg)


def set_head_enabled(model, task, flag):
    return model.set_head_enabled(task, flag)


# --------------------------------------------------------------------------
# attention maps


def export_attention_map(model, task, x):
    """Attention weights of one task head for a single input, in its layout.

    PM and RTM give an H' x W' map, PMG a patch_div x patch_div map, RTMG a
    vector over Gram rows (the spatial map in concat mode).
    """
    if task not in model.heads:
        raise ConfigError(f"unknown task {task!r}")
    head = model.heads[task]
    if head.variant == "gap":
        raise UnsupportedVariantError(f"head {task!r} uses GAP and has no attention map")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    was = model.training
    model.eval()
    try:
        model.forward(x[:1], [task])
    finally:
        model.train(was)
    agg = head.aggregator
    alpha = agg.spatial.alpha if isinstance(agg, DualAggregator) else agg.alpha
    alpha = np.asarray(alpha[0], dtype=np.float64)
    fam = model.cfg.family
    if fam in ("PM", "RTM") or (fam == "RTMG" and model.cfg.rtmg_mode == "concat"):
        return alpha.reshape(model.map_hw)
    if fam == "PMG":
        return alpha.reshape(model.cfg.patch_div, model.cfg.patch_div)
    return alpha


def attention_map_text(amap):
    amap = np.atleast_2d(amap)
    return "\n".join(" ".join(f"{v:.6f}" for v in row) for row in amap) + "\n"


def attention_map_pgm(amap):
    """8-bit binary PGM (P5), scaled so the largest weight is 255."""
    amap = np.atleast_2d(np.asarray(amap, dtype=np.float64))
    peak = amap.max()
    px = np.zeros_like(amap) if peak <= 0 else amap / peak
    data = np.clip(np.rint(px * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    return b"P5\n%d %d\n255\n" % (w, h) + data.tobytes()

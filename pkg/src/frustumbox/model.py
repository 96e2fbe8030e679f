"""The box-annotation network.

Pipeline per forward pass: pointwise embedding MLP, optional positional
encoding, seven learned box tokens prepended to the point sequence, a
per-object (local) pre-norm transformer stack, an optional cross-object
(global) stack that attends along the batch axis, an optional decoder whose
queries are the box-token features, and small MLP heads that emit the raw
box vector (center offset, log extents, yaw) plus front/back logits.

All learned state lives in a flat name-to-Parameter mapping so the
optimizer and checkpoints stay structure-agnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointMismatch, load_checkpoint, save_checkpoint
from .geometry import DIRECTION_BACK, wrap_angle, Box3D
from .tensor import Parameter, Tensor


class InvalidMode(Exception):
    """Unknown positional-encoding mode."""


class IndexOutOfRange(Exception):
    """Attention export index outside the captured trace."""


POS_MODES = ("none", "sine", "mlp")
N_BOX_TOKENS = 7
SINE_FREQS = 8  # fixed frequencies 2^0 .. 2^7 per coordinate


@dataclass
class ModelConfig:
    """Architecture hyperparameters and ablation toggles.

    Defaults are the full-scale configuration; ``desk()`` is the small
    preset used by the test and acceptance suites.
    """

    d: int = 512
    n_points: int = 1024
    n_local_layers: int = 8
    n_global_layers: int = 3
    n_decoder_layers: int = 3
    heads: int = 8
    head_hidden: int = 1024
    use_global: bool = True
    use_decoder: bool = True
    pos_mode: str = "mlp"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.pos_mode not in POS_MODES:
            raise InvalidMode(f"pos_mode must be one of {POS_MODES}, got {self.pos_mode!r}")
        if self.d % self.heads != 0:
            raise T.HeadDivisibility(f"embed width {self.d} not divisible by {self.heads} heads")
        if self.d < 1 or self.n_points < 1 or self.head_hidden < 1:
            raise ValueError("widths and point counts must be >= 1")
        if self.n_local_layers < 1:
            raise ValueError("at least one local layer is required")
        if self.use_global and self.n_global_layers < 1:
            raise ValueError("use_global requires n_global_layers >= 1")
        if self.use_decoder and self.n_decoder_layers < 1:
            raise ValueError("use_decoder requires n_decoder_layers >= 1")

    @classmethod
    def desk(cls, **overrides):
        base = dict(
            d=64,
            n_points=128,
            n_local_layers=2,
            n_global_layers=1,
            n_decoder_layers=1,
            heads=8,
            head_hidden=128,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AttentionTrace:
    """Per-layer attention weights captured during one forward pass."""

    local_layers: list = field(default_factory=list)
    global_layers: list = field(default_factory=list)
    decoder_self: list = field(default_factory=list)
    decoder_cross: list = field(default_factory=list)


@dataclass
class ForwardOutput:
    boxes: Tensor  # (B, 7) raw: center offset, log extents, yaw
    direction_logits: Tensor  # (B, 2) front/back
    attention: AttentionTrace | None = None


@dataclass
class AttentionExport:
    """One reference row of a local-encoder attention map, ranked."""

    indices: np.ndarray  # sequence positions, descending score
    scores: np.ndarray
    token_rows: np.ndarray  # (7, N+7) box-token rows, head-averaged
    full_row: np.ndarray  # the un-truncated reference row


class BoxAnnotator:
    """Frustum sub-clouds in, raw 3D boxes and direction logits out."""

    def __init__(self, config: ModelConfig, rng=None):
        config.validate()
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        self._build(rng)

    # -- parameter construction -------------------------------------------
    def _add(self, name, data):
        p = Parameter(data, name=name)
        self.params[name] = p
        return p

    def _add_linear(self, rng, prefix, fan_in, fan_out, scale=1.0):
        w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
        self._add(f"{prefix}.w", w * scale)
        self._add(f"{prefix}.b", np.zeros(fan_out))

    def _add_layer_norm(self, prefix):
        self._add(f"{prefix}.gain", np.ones(self.config.d))
        self._add(f"{prefix}.bias", np.zeros(self.config.d))

    # Residual-branch output projections start damped so every block opens
    # near the identity; training grows a branch only where it earns its keep.
    RESIDUAL_SCALE = 0.01

    def _add_attention(self, rng, prefix):
        d = self.config.d
        for part in ("q", "k", "v"):
            self._add_linear(rng, f"{prefix}.{part}", d, d)
        self._add_linear(rng, f"{prefix}.o", d, d, scale=self.RESIDUAL_SCALE)

    def _add_encoder_layer(self, rng, prefix):
        d = self.config.d
        self._add_layer_norm(f"{prefix}.ln1")
        self._add_attention(rng, f"{prefix}.attn")
        self._add_layer_norm(f"{prefix}.ln2")
        self._add_linear(rng, f"{prefix}.mlp.l1", d, 2 * d)
        self._add_linear(rng, f"{prefix}.mlp.l2", 2 * d, d, scale=self.RESIDUAL_SCALE)

    def _build(self, rng):
        cfg = self.config
        d = cfg.d
        self._add_linear(rng, "embed.l0", 3, d)
        self._add_linear(rng, "embed.l1", d, d)
        self._add_linear(rng, "embed.l2", d, d)
        if cfg.pos_mode == "mlp":
            self._add_linear(rng, "pos.l0", 3, d)
            self._add_linear(rng, "pos.l1", d, d)
        elif cfg.pos_mode == "sine":
            self._add_linear(rng, "pos.proj", 6 * SINE_FREQS, d)
        self._add("tokens.box", rng.normal(0.0, 0.02, size=(N_BOX_TOKENS, d)))
        for i in range(cfg.n_local_layers):
            self._add_encoder_layer(rng, f"local.{i}")
        if cfg.use_global:
            for i in range(cfg.n_global_layers):
                self._add_encoder_layer(rng, f"global.{i}")
        if cfg.use_decoder:
            for i in range(cfg.n_decoder_layers):
                self._add_layer_norm(f"dec.{i}.ln1")
                self._add_attention(rng, f"dec.{i}.self")
                self._add_layer_norm(f"dec.{i}.ln2")
                self._add_attention(rng, f"dec.{i}.cross")
                self._add_layer_norm(f"dec.{i}.ln3")
                self._add_linear(rng, f"dec.{i}.mlp.l1", d, 2 * d)
                self._add_linear(rng, f"dec.{i}.mlp.l2", 2 * d, d)
        # the pre-norm residual stream is scale-free, so the readout gets one
        # shared normalization before the head MLPs
        self._add_layer_norm("head.norm")
        for head in ("loc", "dim", "yaw"):
            self._add_linear(rng, f"head.{head}.l1", d, cfg.head_hidden)
            self._add_linear(rng, f"head.{head}.l2", cfg.head_hidden, 1)
        self._add_linear(rng, "head.dir.l1", d, cfg.head_hidden)
        self._add_linear(rng, "head.dir.l2", cfg.head_hidden, 2)

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    # -- small helpers ------------------------------------------------------
    def _p(self, name):
        return self.params[name]

    def _linear(self, x, prefix):
        return T.linear(x, self._p(f"{prefix}.w"), self._p(f"{prefix}.b"))

    def _attn_params(self, prefix):
        return {
            "wq": self._p(f"{prefix}.q.w"),
            "bq": self._p(f"{prefix}.q.b"),
            "wk": self._p(f"{prefix}.k.w"),
            "bk": self._p(f"{prefix}.k.b"),
            "wv": self._p(f"{prefix}.v.w"),
            "bv": self._p(f"{prefix}.v.b"),
            "wo": self._p(f"{prefix}.o.w"),
            "bo": self._p(f"{prefix}.o.b"),
        }

    def _layer_norm(self, x, prefix):
        return T.layer_norm(x, self._p(f"{prefix}.gain"), self._p(f"{prefix}.bias"))

    def _encoder_layer(self, x, prefix, order_invariant=False):
        h = self._layer_norm(x, f"{prefix}.ln1")
        attn_out, weights = T.multi_head_attention(
            h, h, h, self.config.heads, self._attn_params(f"{prefix}.attn"),
            order_invariant=order_invariant,
        )
        x = x + attn_out
        h = self._layer_norm(x, f"{prefix}.ln2")
        x = x + self._linear(T.relu(self._linear(h, f"{prefix}.mlp.l1")), f"{prefix}.mlp.l2")
        return x, weights

    # -- forward components --------------------------------------------------
    def embed_points(self, points):
        """Pointwise MLP with two hidden layers: (B, N, 3) -> (B, N, d)."""
        x = T.as_tensor(points)
        if x.ndim != 3 or x.shape[-1] != 3:
            raise T.ShapeMismatch(f"embed_points expects (B, N, 3), got {x.shape}")
        x = T.relu(self._linear(x, "embed.l0"))
        x = T.relu(self._linear(x, "embed.l1"))
        return self._linear(x, "embed.l2")

    def positional_encode(self, points):
        """Coordinate-based positional features: (B, N, 3) -> (B, N, d)."""
        mode = self.config.pos_mode
        pts = T.as_tensor(points)
        if mode == "mlp":
            h = T.relu(self._linear(pts, "pos.l0"))
            return self._linear(h, "pos.l1")
        if mode == "sine":
            feats = _sine_features(pts.data)
            return self._linear(Tensor(feats), "pos.proj")
        raise InvalidMode(f"positional encoding requested with pos_mode={mode!r}")

    def box_token_sequence(self, batch_size):
        """The learned box tokens broadcast to (B, 7, d)."""
        tok = self._p("tokens.box")
        return T.broadcast_to(
            T.reshape(tok, (1, N_BOX_TOKENS, self.config.d)),
            (batch_size, N_BOX_TOKENS, self.config.d),
        )

    def forward_local(self, embeddings, capture=False):
        """Box tokens prepended, then the per-object encoder stack.

        embeddings: (B, N, d). Returns ((B, N+7, d), [attention weights]).
        """
        B = embeddings.shape[0]
        x = T.concat([self.box_token_sequence(B), embeddings], axis=1)
        traces = []
        for i in range(self.config.n_local_layers):
            x, w = self._encoder_layer(x, f"local.{i}")
            if capture:
                traces.append(w)
        return x, traces

    def forward_global(self, features, capture=False):
        """Cross-object encoder: attends along the batch axis per position.

        The sequence is transposed to (N+7, B, d) so each of the N+7
        positions sees its batch of peer objects as the attention axis, then
        transposed back. Reductions over the peer axis are order-invariant,
        so permuting the batch permutes the output bit-exactly.
        """
        x = T.transpose_batch_seq(features)
        traces = []
        for i in range(self.config.n_global_layers):
            x, w = self._encoder_layer(x, f"global.{i}", order_invariant=True)
            if capture:
                traces.append(w)
        return T.transpose_batch_seq(x), traces

    def forward_decoder(self, encoder_out, capture=False):
        """Box-token queries attend to point features: -> (B, 7, d)."""
        q = encoder_out[:, :N_BOX_TOKENS]
        mem = encoder_out[:, N_BOX_TOKENS:]
        self_traces, cross_traces = [], []
        for i in range(self.config.n_decoder_layers):
            h = self._layer_norm(q, f"dec.{i}.ln1")
            sa, w_self = T.multi_head_attention(
                h, h, h, self.config.heads, self._attn_params(f"dec.{i}.self")
            )
            q = q + sa
            h = self._layer_norm(q, f"dec.{i}.ln2")
            ca, w_cross = T.multi_head_attention(
                h, mem, mem, self.config.heads, self._attn_params(f"dec.{i}.cross")
            )
            q = q + ca
            h = self._layer_norm(q, f"dec.{i}.ln3")
            q = q + self._linear(T.relu(self._linear(h, f"dec.{i}.mlp.l1")), f"dec.{i}.mlp.l2")
            if capture:
                self_traces.append(w_self)
                cross_traces.append(w_cross)
        return q, self_traces, cross_traces

    def _head(self, x, prefix):
        h = T.leaky_relu(self._linear(x, f"{prefix}.l1"))
        return self._linear(h, f"{prefix}.l2")

    def regress_box(self, decoded):
        """Three tokenwise heads: location from tokens 0-2, extents (as logs)
        from tokens 3-5, yaw from token 6. Returns the raw (B, 7) vector."""
        x = self._layer_norm(decoded, "head.norm")
        loc = T.reshape(self._head(x[:, 0:3], "head.loc"), (decoded.shape[0], 3))
        dim = T.reshape(self._head(x[:, 3:6], "head.dim"), (decoded.shape[0], 3))
        yaw = T.reshape(self._head(x[:, 6:7], "head.yaw"), (decoded.shape[0], 1))
        return T.concat([loc, dim, yaw], axis=1)

    def classify_direction(self, decoded):
        """Front/back logits from the yaw token's feature: (B, 2).

        The yaw token is kept as a length-1 sequence axis so the product
        stays batched per object; collapsing to a bare (B, d) matrix would
        let the BLAS micro-kernel's row tiling make results depend on an
        object's position in the batch at the last-bit level.
        """
        x = self._layer_norm(decoded, "head.norm")
        out = self._head(x[:, 6:7], "head.dir")
        return T.reshape(out, (decoded.shape[0], 2))

    def forward(self, points, capture_attention=False):
        """Full pass: embed, encode, decode, regress.

        points: (B, N, 3) array or Tensor of centroid-normalized
        coordinates. Returns a ForwardOutput; the attention trace is
        captured only when requested.
        """
        pts = T.as_tensor(points)
        emb = self.embed_points(pts)
        if self.config.pos_mode != "none":
            emb = emb + self.positional_encode(pts)
        trace = AttentionTrace() if capture_attention else None
        x, local_w = self.forward_local(emb, capture=capture_attention)
        if capture_attention:
            trace.local_layers = local_w
        if self.config.use_global:
            x, global_w = self.forward_global(x, capture=capture_attention)
            if capture_attention:
                trace.global_layers = global_w
        if self.config.use_decoder:
            decoded, w_self, w_cross = self.forward_decoder(x, capture=capture_attention)
            if capture_attention:
                trace.decoder_self = w_self
                trace.decoder_cross = w_cross
        else:
            decoded = x[:, :N_BOX_TOKENS]
        return ForwardOutput(
            boxes=self.regress_box(decoded),
            direction_logits=self.classify_direction(decoded),
            attention=trace,
        )

    # -- persistence ----------------------------------------------------------
    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays):
        """Install parameter values; name set and shapes must match exactly."""
        mine, theirs = set(self.params), set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            unexpected = sorted(theirs - mine)
            raise CheckpointMismatch(
                f"parameter names disagree; missing={missing}, unexpected={unexpected}"
            )
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise CheckpointMismatch(
                    f"shape of {name!r}: checkpoint {arr.shape} vs model {p.data.shape}"
                )
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=np.float64)

    def save(self, path, extras=None, extra_arrays=None):
        config = {"model": self.config.to_dict()}
        return save_checkpoint(path, config, self.state_arrays(), extras, extra_arrays)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str):
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        config = ModelConfig.from_dict(ckpt.config["model"])
        model = cls(config, rng=np.random.default_rng(0))
        model.load_state(ckpt.params)
        return model


def _sine_features(points):
    """Fixed sinusoidal features of raw coordinates: (..., 3) -> (..., 6*F)."""
    freqs = 2.0 ** np.arange(SINE_FREQS)
    scaled = points[..., None] * freqs  # (..., 3, F)
    feats = np.concatenate([np.sin(scaled), np.cos(scaled)], axis=-1)  # (..., 3, 2F)
    return feats.reshape(points.shape[:-1] + (6 * SINE_FREQS,))


def decode_prediction(raw, logits, centroid=None):
    """Raw head outputs to a Box3D in the frustum (or original) frame.

    Extents decode through the same bounded log parameterization the
    objective uses. The regressed yaw is wrapped to [-pi/2, pi/2); the
    direction classifier then flips it by pi when the back label wins,
    restoring the full circle that the direction-invariant box objective
    cannot see.
    """
    from .loss import squash_log_extent

    raw = np.asarray(raw, dtype=np.float64).reshape(7)
    logits = np.asarray(logits, dtype=np.float64).reshape(2)
    yaw = (raw[6] + math.pi / 2) % math.pi - math.pi / 2
    if int(np.argmax(logits)) == DIRECTION_BACK:
        yaw = wrap_angle(yaw + math.pi)
    center = raw[:3] if centroid is None else raw[:3] + np.asarray(centroid, dtype=np.float64)
    w, l, h = np.exp(squash_log_extent(raw[3:6]))
    return Box3D(center[0], center[1], center[2], w, l, h, yaw)


def direction_score(logits):
    """Max softmax probability of the direction head; the export confidence."""
    logits = np.asarray(logits, dtype=np.float64).reshape(2)
    e = np.exp(logits - logits.max())
    return float(e.max() / e.sum())


def export_attention(trace, object_index, reference_point_index, top_k,
                     layer=-1, reference_is_token=False):
    """Rank one local-encoder attention row for export.

    The row belongs to the chosen reference point (sequence position
    7 + point index) or to a box token, head-averaged, in the chosen local
    layer. Returns the descending ranking plus the head-averaged box-token
    rows for the same object and layer.
    """
    if not trace or not trace.local_layers:
        raise IndexOutOfRange("no local attention trace captured")
    try:
        weights = trace.local_layers[layer].data
    except IndexError as err:
        raise IndexOutOfRange(f"layer {layer} outside trace of {len(trace.local_layers)}") from err
    B, _, S, _ = weights.shape
    if not 0 <= object_index < B:
        raise IndexOutOfRange(f"object {object_index} outside batch of {B}")
    if reference_is_token:
        if not 0 <= reference_point_index < N_BOX_TOKENS:
            raise IndexOutOfRange(f"token {reference_point_index} outside 0..6")
        position = reference_point_index
    else:
        n_points = S - N_BOX_TOKENS
        if not 0 <= reference_point_index < n_points:
            raise IndexOutOfRange(f"point {reference_point_index} outside 0..{n_points - 1}")
        position = N_BOX_TOKENS + reference_point_index
    if not 1 <= top_k <= S:
        raise IndexOutOfRange(f"top_k {top_k} outside 1..{S}")
    row = weights[object_index, :, position, :].mean(axis=0)
    order = np.argsort(-row, kind="stable")[:top_k]
    token_rows = weights[object_index, :, :N_BOX_TOKENS, :].mean(axis=0)
    return AttentionExport(
        indices=order,
        scores=row[order],
        token_rows=token_rows,
        full_row=row,
    )

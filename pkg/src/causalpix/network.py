"""Causal two-stream convolutional network with down/up-sampling and skips.

Two feature streams are carried through the network:

* ``u`` (vertical): output row i only sees input rows strictly above i.
* ``ul`` (vertical + left): additionally sees pixels to the left in row i.

Both streams are built from shifted convolutions whose padding is placed on
the top (and left) edges only, then made strict by a one-pixel shift at the
network input. The encoder runs three blocks of gated residual layers with
stride-2 subsampling between them; the decoder mirrors it with transposed
convolutions, and every encoder layer output is fed to its mirror decoder
layer as an auxiliary input.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .dlm import CHANNELS_PER_COMPONENT, DEFAULT_K
from .tensor import Tensor

SOFTMAX_HEAD_CHANNELS = 1536
LIKELIHOODS = ("dlm", "softmax", "dequantized")
U_KERNEL = (2, 3)
UL_KERNEL = (2, 2)

# Per-layer (u kernel, ul kernel) stacks giving the two published field shapes.
FIELD_11X5 = (((1, 3), (2, 3)), ((2, 3), (2, 1)))
FIELD_15X8 = (((2, 3), (2, 2)), ((2, 3), (1, 1)), ((1, 1), (2, 3)))


class ConfigError(ValueError):
    """A model configuration field is invalid; the message names the field."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description. Defaults are the full-size CIFAR model."""

    n_blocks: int = 6
    layers_per_block: int = 5
    n_filters: int = 192
    K: int = DEFAULT_K
    dropout_rate: float = 0.5
    use_downsampling: bool = True
    use_shortcuts: bool = True
    n_classes: int | None = None
    small_field: tuple | None = None
    likelihood: str = "dlm"
    dtype: str = "float32"

    def __post_init__(self):
        if self.small_field is not None:
            object.__setattr__(self, "small_field", _normalize_field(self.small_field))
        self.validate()

    def validate(self) -> None:
        for name in ("layers_per_block", "n_filters", "K"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.use_downsampling and self.n_blocks != 6:
            raise ConfigError("n_blocks must be 6 when use_downsampling is set")
        if self.n_blocks < 2 or self.n_blocks % 2:
            raise ConfigError("n_blocks must be an even integer >= 2")
        if self.n_classes is not None and int(self.n_classes) < 1:
            raise ConfigError("n_classes must be positive when given")
        if self.small_field is not None and self.use_downsampling:
            raise ConfigError("small_field requires use_downsampling = false")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"likelihood must be one of {LIKELIHOODS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def head_channels(self) -> int:
        if self.likelihood == "softmax":
            return SOFTMAX_HEAD_CHANNELS
        return CHANNELS_PER_COMPONENT * self.K

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.small_field is not None:
            d["small_field"] = [[list(uk), list(ulk)] for uk, ulk in self.small_field]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _normalize_field(layers) -> tuple:
    out = []
    for layer in layers:
        (uh, uw), (lh, lw) = layer
        if min(uh, uw, lh, lw) < 1 or uw % 2 == 0:
            raise ConfigError(f"small_field layer {layer!r}: kernels must be positive and the u kernel width odd")
        out.append(((int(uh), int(uw)), (int(lh), int(lw))))
    return tuple(out)


def desk_config(**changes) -> ModelConfig:
    """Small model used for desk-scale runs (16x16 images)."""
    base = ModelConfig(layers_per_block=2, n_filters=32, K=DEFAULT_K)
    return base.replace(**changes) if changes else base


# ---------------------------------------------------------------------------
# shifted convolutions


def down_shifted_conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Convolution whose output row i sees input rows <= i (columns centered).

    ``w`` has shape [kh, kw, Cin, Cout] with odd kw.
    """
    kh, kw = w.shape[:2]
    if kw % 2 == 0:
        raise T.ShapeError(f"down-shifted conv needs an odd kernel width, got {kw}")
    out = T.conv2d(x, w, stride, (kh - 1, 0, (kw - 1) // 2, (kw - 1) // 2))
    return out if b is None else out + b


def down_right_shifted_conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Convolution whose output (i, j) sees inputs (i', j') with i' <= i, j' <= j."""
    kh, kw = w.shape[:2]
    out = T.conv2d(x, w, stride, (kh - 1, 0, kw - 1, 0))
    return out if b is None else out + b


def down_shifted_deconv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-2 transposed counterpart of :func:`down_shifted_conv`.

    ``w`` has shape [kh, kw, Cout, Cin] (the kernel of the adjoint conv).
    """
    kh, kw = w.shape[:2]
    n, h, wd, _ = x.shape
    out = T.conv2d_transpose(x, w, 2, (0, kh - 1, (kw - 1) // 2, (kw - 1) // 2), output_hw=(2 * h, 2 * wd))
    return out if b is None else out + b


def down_right_shifted_deconv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    kh, kw = w.shape[:2]
    n, h, wd, _ = x.shape
    out = T.conv2d_transpose(x, w, 2, (0, kh - 1, 0, kw - 1), output_hw=(2 * h, 2 * wd))
    return out if b is None else out + b


def down_shift(x: Tensor) -> Tensor:
    """Move every row one step down, filling the top row with zeros."""
    return T.pad(x[:, :-1], ((0, 0), (1, 0), (0, 0), (0, 0)))


def right_shift(x: Tensor) -> Tensor:
    return T.pad(x[:, :, :-1], ((0, 0), (0, 0), (1, 0), (0, 0)))


def concat_elu(x: Tensor) -> Tensor:
    return T.elu(T.concat([x, -x], axis=-1))


def nin(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 convolution over the channel axis."""
    return T.dense(x, w, b)


# ---------------------------------------------------------------------------
# model


class Model:
    """Named parameter store plus the wiring implied by its config.

    Parameters are created lazily by a dry forward pass in a fixed order, so
    the same (config, seed) always yields the same parameter values.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._dtype = np.dtype(config.dtype)
        self._init_rng: np.random.Generator | None = np.random.default_rng(seed)
        size = 4 if config.use_downsampling else 2
        label = np.zeros(1, dtype=np.int64) if config.n_classes else None
        forward(self, np.zeros((1, size, size, 3), dtype=self._dtype), label=label, mode="eval")
        self._init_rng = None

    def param(self, name: str, shape: Sequence[int], scale: float = 0.0) -> Tensor:
        """Fetch ``name``; during construction, create it ~ N(0, scale^2 / fan_in)."""
        p = self.params.get(name)
        if p is not None:
            return p
        if self._init_rng is None:
            raise KeyError(f"model has no parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if scale:
            fan_in = int(np.prod(shape[:-1]))
            value = self._init_rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)
        else:
            value = np.zeros(shape)
        p = Tensor(value.astype(self._dtype), requires_grad=True)
        self.params[name] = p
        return p

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        """Replace parameter values (same names and shapes)."""
        if set(values) != set(self.params):
            missing = set(self.params) ^ set(values)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, v in values.items():
            v = np.asarray(v, dtype=self._dtype)
            if v.shape != self.params[name].shape:
                raise T.ShapeError(f"{name}: shape {v.shape} != {self.params[name].shape}")
            self.params[name] = Tensor(v, requires_grad=True)

    def param_values(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


class _Builder:
    """Carries per-forward state: the model, mode, dropout RNG and class one-hot."""

    def __init__(self, model: Model, mode: str, rng, onehot):
        self.model = model
        self.train = mode == "train"
        self.rng = rng
        self.onehot = onehot
        cfg = model.config
        self.F = cfg.n_filters

    def conv(self, name, x, kernel, cout, kind, scale=1.0, stride=1):
        kh, kw = kernel
        w = self.model.param(f"{name}.w", (kh, kw, x.shape[-1], cout), scale)
        b = self.model.param(f"{name}.b", (cout,))
        fn = down_shifted_conv if kind == "down" else down_right_shifted_conv
        return fn(x, w, b, stride)

    def deconv(self, name, x, kernel, kind):
        kh, kw = kernel
        c = x.shape[-1]
        w = self.model.param(f"{name}.w", (kh, kw, c, c), 1.0)
        b = self.model.param(f"{name}.b", (c,))
        fn = down_shifted_deconv if kind == "down" else down_right_shifted_deconv
        return fn(x, w, b)

    def nin(self, name, x, cout, scale=1.0):
        w = self.model.param(f"{name}.w", (x.shape[-1], cout), scale)
        b = self.model.param(f"{name}.b", (cout,))
        return nin(x, w, b)

    def class_bias(self, name, width):
        if self.onehot is None:
            return None
        w = self.model.param(f"{name}.w", (self.onehot.shape[-1], width))
        bias = T.dense(Tensor(self.onehot.astype(w.dtype)), w)
        return bias.reshape(bias.shape[0], 1, 1, width)

    def dropout(self, x):
        rate = self.model.config.dropout_rate
        if not self.train or rate == 0.0:
            return x
        keep = self.rng.random(x.shape) >= rate
        return T.dropout_mask_apply(x, keep / (1.0 - rate))

    def gated_resnet(self, name, x, kind, kernel, aux=None):
        return gated_resnet(self, name, x, kind, kernel, aux)


def gated_resnet(builder: _Builder, name: str, x: Tensor, kind: str, kernel, aux: Tensor | None = None) -> Tensor:
    """Gated residual layer: x + a * sigmoid(b).

    ``c = conv(elu2(x))``; when ``aux`` is given, ``c += nin(elu2(aux))``;
    ``c = dropout(elu2(c))``; ``(a, b) = split(conv(c) + class_bias)``.
    """
    if aux is not None and aux.shape[:3] != x.shape[:3]:
        raise T.ShapeError(f"aux {aux.shape} does not match input {x.shape}")
    F = x.shape[-1]
    c = builder.conv(f"{name}.conv1", concat_elu(x), kernel, F, kind)
    if aux is not None:
        c = c + builder.nin(f"{name}.aux", concat_elu(aux), F)
    c = builder.dropout(concat_elu(c))
    c2 = builder.conv(f"{name}.conv2", c, kernel, 2 * F, kind, scale=0.1)
    bias = builder.class_bias(f"{name}.cls", 2 * F)
    if bias is not None:
        c2 = c2 + bias
    a, g = T.split(c2, 2, axis=-1)
    return x + a * T.sigmoid(g)


def condition_on_class(model: Model, label, layer: str) -> Tensor:
    """Class bias vector(s) of the gated layer ``layer`` for ``label``.

    ``layer`` is the gated layer prefix, e.g. ``"down0.0.u"``. Returns a
    [len(labels), 2 * n_filters] Tensor.
    """
    onehot = _onehot(model.config, label)
    w = model.param(f"{layer}.cls.w", ())
    return T.dense(Tensor(onehot.astype(w.dtype)), w)


def _onehot(config: ModelConfig, label) -> np.ndarray:
    if config.n_classes is None:
        raise ConfigError("a class label was given but n_classes is not set")
    label = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if (label < 0).any() or (label >= config.n_classes).any():
        raise ValueError(f"class label out of range [0, {config.n_classes})")
    return np.eye(config.n_classes)[label]


def preprocess(images) -> np.ndarray:
    """uint8 images [N, H, W, 3] to centered floats in [-1, 1]."""
    return np.asarray(images, dtype=np.float64) / 127.5 - 1.0


def forward(model: Model, image, label=None, mode: str = "eval", rng=None, return_streams: bool = False):
    """Run the network on centered images [N, H, W, 3].

    Returns the raw head Tensor [N, H, W, C] where C is 10*K for the mixture
    likelihoods and 1536 for the softmax head. ``mode='train'`` applies
    dropout with masks drawn from ``rng``.
    """
    cfg = model.config
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model._dtype))
    if x.ndim != 4 or x.shape[-1] != 3:
        raise T.ShapeError(f"expected [N, H, W, 3] input, got {x.shape}")
    if cfg.use_downsampling and (x.shape[1] % 4 or x.shape[2] % 4):
        raise T.ShapeError(f"spatial extents {x.shape[1:3]} must be divisible by 4")
    if mode == "train" and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    onehot = None
    if label is not None:
        onehot = _onehot(cfg, label)
        if onehot.shape[0] != x.shape[0]:
            raise T.ShapeError("one label per image is required")
    elif cfg.n_classes is not None and model._init_rng is None:
        raise ValueError("this model is class-conditional; a label is required")
    bld = _Builder(model, mode, rng, onehot)

    ones = Tensor(np.ones(x.shape[:3] + (1,), dtype=x.dtype))
    xin = T.concat([x, ones], axis=-1)
    F = cfg.n_filters
    u = down_shift(bld.conv("in.u", xin, (2, 3), F, "down"))
    ul = down_shift(bld.conv("in.ul_v", xin, (1, 3), F, "down")) + right_shift(
        bld.conv("in.ul_h", xin, (2, 1), F, "right")
    )

    if cfg.small_field is not None:
        for i, (uk, ulk) in enumerate(cfg.small_field):
            u = bld.gated_resnet(f"field{i}.u", u, "down", uk)
            ul = bld.gated_resnet(f"field{i}.ul", ul, "right", ulk, aux=u)
        streams = {"u": u, "ul": ul}
    else:
        u, ul, streams = _encoder_decoder(bld, u, ul)

    head = bld.nin("head", T.elu(ul), cfg.head_channels, scale=0.1)
    return (head, streams) if return_streams else head


def _encoder_decoder(bld: _Builder, u: Tensor, ul: Tensor):
    cfg = bld.model.config
    n_half = cfg.n_blocks // 2
    nr = cfg.layers_per_block
    u_list, ul_list = [u], [ul]
    for blk in range(n_half):
        for layer in range(nr):
            u = bld.gated_resnet(f"down{blk}.{layer}.u", u, "down", U_KERNEL)
            ul = bld.gated_resnet(f"down{blk}.{layer}.ul", ul, "right", UL_KERNEL, aux=u)
            u_list.append(u)
            ul_list.append(ul)
        if blk < n_half - 1:
            stride = 2 if cfg.use_downsampling else 1
            u = bld.conv(f"down{blk}.resample.u", u, U_KERNEL, cfg.n_filters, "down", stride=stride)
            ul = bld.conv(f"down{blk}.resample.ul", ul, UL_KERNEL, cfg.n_filters, "right", stride=stride)
            u_list.append(u)
            ul_list.append(ul)
    streams = {"encoder_u": list(u_list), "encoder_ul": list(ul_list)}

    u, ul = u_list.pop(), ul_list.pop()
    for blk in range(n_half):
        n_layers = nr if blk == 0 else nr + 1
        for layer in range(n_layers):
            if cfg.use_shortcuts:
                u = bld.gated_resnet(f"up{blk}.{layer}.u", u, "down", U_KERNEL, aux=u_list.pop())
                aux = T.concat([u, ul_list.pop()], axis=-1)
            else:
                u = bld.gated_resnet(f"up{blk}.{layer}.u", u, "down", U_KERNEL)
                aux = u
            ul = bld.gated_resnet(f"up{blk}.{layer}.ul", ul, "right", UL_KERNEL, aux=aux)
        if blk < n_half - 1:
            if cfg.use_downsampling:
                u = bld.deconv(f"up{blk}.resample.u", u, U_KERNEL, "down")
                ul = bld.deconv(f"up{blk}.resample.ul", ul, UL_KERNEL, "right")
            else:
                u = bld.conv(f"up{blk}.resample.u", u, U_KERNEL, cfg.n_filters, "down")
                ul = bld.conv(f"up{blk}.resample.ul", ul, UL_KERNEL, cfg.n_filters, "right")
    streams.update(u=u, ul=ul)
    return u, ul, streams


# ---------------------------------------------------------------------------
# receptive field


@dataclass(frozen=True)
class FieldDescriptor:
    """Dependency region of one output pixel, relative to its position.

    ``row_spans`` maps a row offset (negative = above, 0 = current row) to the
    inclusive column-offset interval seen in that row. ``rows_above``,
    ``width`` and ``cells_left`` summarize it; ``is_rectangle`` tells whether
    every row above has the same span. ``whole_prefix`` marks configs whose
    field covers the entire raster prefix (down/up-sampling networks).
    """

    rows_above: int
    width: int
    cells_left: int
    col_min: int
    col_max: int
    is_rectangle: bool
    row_spans: tuple = ()
    whole_prefix: bool = False

    def mask(self, height: int, width: int, i: int, j: int) -> np.ndarray:
        """Boolean [height, width] mask of input pixels feeding output (i, j)."""
        m = np.zeros((height, width), dtype=bool)
        if self.whole_prefix:
            m[:i] = True
            m[i, :j] = True
            return m
        for di, (lo, hi) in self.row_spans:
            r = i + di
            if 0 <= r < height:
                m[r, max(j + lo, 0) : max(min(j + hi + 1, width), 0)] = True
        return m


class _Region:
    """Union of per-row column intervals, closed under shifted convolution."""

    def __init__(self, spans: dict[int, tuple[int, int]]):
        self.spans = dict(spans)

    def union(self, other: _Region) -> _Region:
        out = dict(self.spans)
        for r, (lo, hi) in other.spans.items():
            if r in out:
                a, b = out[r]
                if lo > b + 1 or a > hi + 1:
                    raise ValueError("region union is not an interval per row")
                out[r] = (min(a, lo), max(b, hi))
            else:
                out[r] = (lo, hi)
        return _Region(out)

    def conv(self, kh: int, left: int, right: int) -> _Region:
        """Dependencies after a conv whose taps reach kh-1 rows up, ``left``/``right`` cols."""
        out = _Region({})
        for a in range(kh):
            out = out.union(_Region({r - a: (lo - left, hi + right) for r, (lo, hi) in self.spans.items()}))
        return out

    def down(self, kh, kw):
        return self.conv(kh, (kw - 1) // 2, (kw - 1) // 2)

    def right(self, kh, kw):
        return self.conv(kh, kw - 1, 0)

    def shift(self, dr: int, dc: int) -> _Region:
        return _Region({r - dr: (lo - dc, hi - dc) for r, (lo, hi) in self.spans.items()})


def receptive_field(config: ModelConfig) -> FieldDescriptor:
    """Analytic dependency region of the head output, from layer geometry."""
    if config.small_field is None:
        return FieldDescriptor(0, 0, 0, 0, 0, False, (), whole_prefix=True)
    pixel = _Region({0: (0, 0)})
    u = pixel.down(2, 3).shift(1, 0)
    ul = pixel.down(1, 3).shift(1, 0).union(pixel.right(2, 1).shift(0, 1))
    for (uh, uw), (lh, lw) in config.small_field:
        u = u.down(uh, uw).down(uh, uw).union(u)
        ul = ul.right(lh, lw).union(u).right(lh, lw).union(ul)
    spans = ul.spans
    above = {r: s for r, s in spans.items() if r < 0}
    col_min = min(lo for lo, _ in above.values())
    col_max = max(hi for _, hi in above.values())
    rows_above = -min(above)
    is_rect = len(above) == rows_above and all(s == (col_min, col_max) for s in above.values())
    cur = spans.get(0)
    cells_left = 0 if cur is None else -cur[0]
    if cur is not None and cur[1] != -1:
        raise AssertionError("field reaches the current pixel")
    return FieldDescriptor(
        rows_above=rows_above,
        width=col_max - col_min + 1,
        cells_left=cells_left,
        col_min=col_min,
        col_max=col_max,
        is_rectangle=is_rect,
        row_spans=tuple(sorted(spans.items())),
    )


def input_gradient_masks(model: Model, height: int, width: int, positions: Iterable[tuple[int, int]] | None = None, seed: int = 0):
    """Probe which input pixels influence each output location.

    Runs one eval-mode forward on a random image and differentiates the sum
    of the head channels at each requested (i, j). Returns a dict mapping
    (i, j) to a boolean [height, width] mask of nonzero input gradients.
    """
    rng = np.random.default_rng(seed)
    img = Tensor(rng.uniform(-1, 1, size=(1, height, width, 3)).astype(model._dtype), requires_grad=True)
    label = np.zeros(1, dtype=np.int64) if model.config.n_classes else None
    if positions is None:
        positions = [(i, j) for i in range(height) for j in range(width)]
    masks = {}
    with T.Tape() as tape:
        head = forward(model, img, label=label, mode="eval")
        roots = {(i, j): head[0, i, j].sum() for i, j in positions}
    for pos, root in roots.items():
        (g,) = T.backward(tape, root, [img])
        masks[pos] = np.any(g[0] != 0, axis=-1)
    return masks


def causality_violations(model: Model, height: int = 8, width: int = 8, seed: int = 0) -> list[tuple]:
    """List (i, j, i', j') where output (i, j) depends on a non-prefix input."""
    bad = []
    for (i, j), mask in input_gradient_masks(model, height, width, seed=seed).items():
        allowed = FieldDescriptor(0, 0, 0, 0, 0, False, whole_prefix=True).mask(height, width, i, j)
        for ii, jj in zip(*np.nonzero(mask & ~allowed)):
            bad.append((i, j, int(ii), int(jj)))
    return bad


def field_mismatches(model: Model, height: int, width: int, seed: int = 0) -> list[tuple[int, int]]:
    """Output positions whose probed mask differs from :func:`receptive_field`."""
    desc = receptive_field(model.config)
    probed = input_gradient_masks(model, height, width, seed=seed)
    return [pos for pos, m in probed.items() if not np.array_equal(m, desc.mask(height, width, *pos))]

"""Declarative network definitions with per-layer binarization policy.

A ModelSpec is an ordered list of named layers forming a DAG (inputs must
reference earlier layers), serializable to a flat one-layer-per-line text
format that travels inside checkpoints and packed models. Presets follow
the convention of binarizing everything except the first convolution and
the final classifier.

Binary blocks run BN -> hardtanh -> (shift + sign) -> binary conv
(weight shift folded in) -> shortcut add; the shifts are recomputed from
their latent parameters on every forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import binarize as B
from . import bitkernel as BK
from . import tensor as T
from .autograd import Parameter, SteKind, Var
from .tensor import ConvGeometry, ShapeError


class SpecError(ValueError):
    """Malformed model description (unknown kind/key, bad reference)."""


class UnsupportedModeError(RuntimeError):
    """Requested execution mode is not available (e.g. packed training)."""


_KINDS = {"conv", "binconv", "linear", "bn", "act", "pool", "gap", "flatten", "add",
          "downsample"}
_ASD_CHOICES = {"off", "original", "tanh", "sigmoid", "dynamic"}
_SCALE_CHOICES = {"off", "analytic", "learned"}


@dataclass
class LayerSpec:
    name: str
    kind: str
    params: dict[str, str] = field(default_factory=dict)
    inputs: tuple[str, ...] = ()

    def geti(self, key: str, default: int | None = None) -> int:
        if key not in self.params:
            if default is None:
                raise SpecError(f"layer {self.name}: missing key {key!r}")
            return default
        return int(self.params[key])

    def gets(self, key: str, default: str | None = None) -> str:
        if key not in self.params:
            if default is None:
                raise SpecError(f"layer {self.name}: missing key {key!r}")
            return default
        return self.params[key]


@dataclass
class ModelSpec:
    layers: list[LayerSpec]

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen = {"input"}
        for layer in self.layers:
            if layer.kind not in _KINDS:
                raise SpecError(f"layer {layer.name}: unknown kind {layer.kind!r}")
            if layer.name in seen:
                raise SpecError(f"duplicate layer name {layer.name!r}")
            if not layer.inputs:
                raise SpecError(f"layer {layer.name}: no inputs")
            for ref in layer.inputs:
                if ref not in seen:
                    raise SpecError(
                        f"layer {layer.name} references {ref!r} which is not defined "
                        "earlier (graph must be a DAG in definition order)"
                    )
            if layer.kind == "binconv":
                asd = layer.gets("asd", "off")
                if asd not in _ASD_CHOICES:
                    raise SpecError(f"layer {layer.name}: bad asd={asd!r}")
                if layer.gets("scale", "off") not in _SCALE_CHOICES:
                    raise SpecError(f"layer {layer.name}: bad scale value")
            seen.add(layer.name)
        if not self.layers:
            raise SpecError("empty model spec")

    def to_text(self) -> str:
        lines = []
        for layer in self.layers:
            kv = " ".join(f"{k}={v}" for k, v in layer.params.items())
            parts = [layer.name, layer.kind]
            if kv:
                parts.append(kv)
            parts.append("inputs=" + ",".join(layer.inputs))
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ModelSpec":
        layers = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) < 3:
                raise SpecError(f"bad layer line: {raw!r}")
            name, kind = tokens[0], tokens[1]
            params: dict[str, str] = {}
            inputs: tuple[str, ...] = ()
            for tok in tokens[2:]:
                if "=" not in tok:
                    raise SpecError(f"bad token {tok!r} in layer {name}")
                k, v = tok.split("=", 1)
                if k == "inputs":
                    inputs = tuple(v.split(","))
                else:
                    params[k] = v
            layers.append(LayerSpec(name=name, kind=kind, params=params, inputs=inputs))
        return ModelSpec(layers)

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind in ("conv", "binconv")]


def assert_paper_policy(spec: ModelSpec):
    """Check the first-conv/last-classifier full-precision convention."""
    convs = spec.conv_layers()
    if not convs or convs[0].kind != "conv":
        raise SpecError("paper policy: first convolution must be full precision")
    for layer in convs[1:]:
        if layer.kind != "binconv":
            raise SpecError(f"paper policy: interior conv {layer.name} must be binary")
    last = spec.layers[-1]
    if last.kind != "linear":
        raise SpecError("paper policy: final layer must be the full-precision classifier")


# ---------------------------------------------------------------------------
# binarization policy shared by the presets


@dataclass
class BinPolicy:
    """Per-layer binarization knobs applied to every binary conv of a preset."""

    asd: str = "off"          # off | original | tanh | sigmoid
    dasd: bool = False        # input-conditioned shift head (overrides asd form)
    re: int = 16
    wsd: bool = False
    scale: str = "off"        # off | analytic | learned

    def layer_params(self) -> dict[str, str]:
        out = {"asd": "dynamic" if self.dasd else self.asd}
        if self.dasd:
            out["re"] = str(self.re)
        out["wsd"] = "on" if self.wsd else "off"
        if self.scale != "off":
            out["scale"] = self.scale
        return out


def _conv_line(name, cin, cout, k, stride, pad, inputs):
    return LayerSpec(name, "conv",
                     {"in": str(cin), "out": str(cout), "k": str(k),
                      "stride": str(stride), "pad": str(pad)}, (inputs,))


def _binconv_line(name, cin, cout, k, stride, pad, inputs, policy: BinPolicy):
    params = {"in": str(cin), "out": str(cout), "k": str(k),
              "stride": str(stride), "pad": str(pad)}
    params.update(policy.layer_params())
    return LayerSpec(name, "binconv", params, (inputs,))


def lenet(policy: BinPolicy | None = None) -> ModelSpec:
    """Two-conv MNIST net; the middle conv is the binary one."""
    p = policy or BinPolicy(asd="sigmoid", wsd=True)
    layers = [
        _conv_line("c1", 1, 16, 5, 1, 2, "input"),
        LayerSpec("p1", "pool", {"k": "2"}, ("c1",)),
        LayerSpec("n1", "bn", {"c": "16"}, ("p1",)),
        LayerSpec("h1", "act", {"fn": "hardtanh"}, ("n1",)),
        _binconv_line("b1", 16, 32, 5, 1, 2, "h1", p),
        LayerSpec("p2", "pool", {"k": "2"}, ("b1",)),
        LayerSpec("n2", "bn", {"c": "32"}, ("p2",)),
        LayerSpec("h2", "act", {"fn": "hardtanh"}, ("n2",)),
        LayerSpec("fl", "flatten", {}, ("h2",)),
        LayerSpec("fc", "linear", {"in": str(32 * 7 * 7), "out": "10"}, ("fl",)),
    ]
    return ModelSpec(layers)


def vgg_small_lite(policy: BinPolicy | None = None, full_width: bool = False) -> ModelSpec:
    """VGG-Small-style CIFAR net; widths halved unless full_width."""
    p = policy or BinPolicy(asd="sigmoid", wsd=True)
    w = [128, 256, 512] if full_width else [64, 128, 256]
    layers = [
        _conv_line("c1", 3, w[0], 3, 1, 1, "input"),
        LayerSpec("n1", "bn", {"c": str(w[0])}, ("c1",)),
        LayerSpec("h1", "act", {"fn": "hardtanh"}, ("n1",)),
        _binconv_line("b1", w[0], w[0], 3, 1, 1, "h1", p),
        LayerSpec("p1", "pool", {"k": "2"}, ("b1",)),
        LayerSpec("n2", "bn", {"c": str(w[0])}, ("p1",)),
        LayerSpec("h2", "act", {"fn": "hardtanh"}, ("n2",)),
        _binconv_line("b2", w[0], w[1], 3, 1, 1, "h2", p),
        LayerSpec("n3", "bn", {"c": str(w[1])}, ("b2",)),
        LayerSpec("h3", "act", {"fn": "hardtanh"}, ("n3",)),
        _binconv_line("b3", w[1], w[1], 3, 1, 1, "h3", p),
        LayerSpec("p2", "pool", {"k": "2"}, ("b3",)),
        LayerSpec("n4", "bn", {"c": str(w[1])}, ("p2",)),
        LayerSpec("h4", "act", {"fn": "hardtanh"}, ("n4",)),
        _binconv_line("b4", w[1], w[2], 3, 1, 1, "h4", p),
        LayerSpec("n5", "bn", {"c": str(w[2])}, ("b4",)),
        LayerSpec("h5", "act", {"fn": "hardtanh"}, ("n5",)),
        _binconv_line("b5", w[2], w[2], 3, 1, 1, "h5", p),
        LayerSpec("p3", "pool", {"k": "2"}, ("b5",)),
        LayerSpec("n6", "bn", {"c": str(w[2])}, ("p3",)),
        LayerSpec("h6", "act", {"fn": "hardtanh"}, ("n6",)),
        LayerSpec("fl", "flatten", {}, ("h6",)),
        LayerSpec("fc", "linear", {"in": str(w[2] * 4 * 4), "out": "10"}, ("fl",)),
    ]
    return ModelSpec(layers)


def resnet20(policy: BinPolicy | None = None, bireal_shortcuts: bool = False) -> ModelSpec:
    """CIFAR ResNet-20: 3 stages of widths 16/32/64, 3 blocks each."""
    p = policy or BinPolicy(asd="sigmoid", wsd=True)
    layers = [_conv_line("stem", 3, 16, 3, 1, 1, "input")]
    prev = "stem"
    cin = 16
    for stage, width in enumerate((16, 32, 64)):
        for blk in range(3):
            stride = 2 if (stage > 0 and blk == 0) else 1
            b = f"s{stage + 1}b{blk + 1}"
            need_ds = stride != 1 or cin != width
            if need_ds:
                # parameter-free shortcut: strided subsample + zero channel pad
                layers.append(LayerSpec(f"{b}_ds", "downsample",
                                        {"stride": str(stride), "out": str(width)}, (prev,)))
                shortcut = f"{b}_ds"
            else:
                shortcut = prev
            layers.append(LayerSpec(f"{b}_bn1", "bn", {"c": str(cin)}, (prev,)))
            layers.append(LayerSpec(f"{b}_ht1", "act", {"fn": "hardtanh"}, (f"{b}_bn1",)))
            layers.append(_binconv_line(f"{b}_c1", cin, width, 3, stride, 1, f"{b}_ht1", p))
            if bireal_shortcuts:
                layers.append(LayerSpec(f"{b}_add1", "add", {}, (f"{b}_c1", shortcut)))
                mid = f"{b}_add1"
            else:
                mid = f"{b}_c1"
            layers.append(LayerSpec(f"{b}_bn2", "bn", {"c": str(width)}, (mid,)))
            layers.append(LayerSpec(f"{b}_ht2", "act", {"fn": "hardtanh"}, (f"{b}_bn2",)))
            layers.append(_binconv_line(f"{b}_c2", width, width, 3, 1, 1, f"{b}_ht2", p))
            second_skip = mid if bireal_shortcuts else shortcut
            layers.append(LayerSpec(f"{b}_add", "add", {}, (f"{b}_c2", second_skip)))
            prev = f"{b}_add"
            cin = width
    layers += [
        LayerSpec("tail_bn", "bn", {"c": "64"}, (prev,)),
        LayerSpec("tail_ht", "act", {"fn": "hardtanh"}, ("tail_bn",)),
        LayerSpec("gap", "gap", {}, ("tail_ht",)),
        LayerSpec("fc", "linear", {"in": "64", "out": "10"}, ("gap",)),
    ]
    return ModelSpec(layers)


def micro2(policy: BinPolicy | None = None) -> ModelSpec:
    """Tiny two-binary-block net for gradient checking and fast tests.

    Block 1 uses the dynamic shift head, block 2 the static sigmoid shift,
    both with weight shifts, so every learnable class is present.
    """
    p1 = policy or BinPolicy(dasd=True, re=2, wsd=True)
    p2 = BinPolicy(asd="sigmoid", wsd=True) if policy is None else policy
    layers = [
        _conv_line("c1", 2, 4, 3, 1, 1, "input"),
        LayerSpec("n1", "bn", {"c": "4"}, ("c1",)),
        LayerSpec("h1", "act", {"fn": "hardtanh"}, ("n1",)),
        _binconv_line("b1", 4, 4, 3, 1, 1, "h1", p1),
        LayerSpec("n2", "bn", {"c": "4"}, ("b1",)),
        LayerSpec("h2", "act", {"fn": "hardtanh"}, ("n2",)),
        _binconv_line("b2", 4, 5, 3, 1, 1, "h2", p2),
        LayerSpec("n3", "bn", {"c": "5"}, ("b2",)),
        LayerSpec("g", "gap", {}, ("n3",)),
        LayerSpec("fc", "linear", {"in": "5", "out": "4"}, ("g",)),
    ]
    return ModelSpec(layers)


PRESETS = {
    "lenet": lenet,
    "vgg_small_lite": vgg_small_lite,
    "resnet20": resnet20,
    "micro2": micro2,
}


# ---------------------------------------------------------------------------
# materialized model


class Model:
    """Parameters plus the forward function for one ModelSpec.

    `path='surrogate'` runs float sign tensors on the autograd tape (the
    trainable route); `path='packed'` runs bit-packed XNOR+popcount
    convolutions (inference only). The two agree at evaluation time.
    """

    def __init__(self, spec: ModelSpec, ste: SteKind = SteKind.ClipSte, dtype=np.float32):
        self.spec = spec
        self.ste = ste
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}
        self.bn_states: dict[str, ag.BatchNormState] = {}
        self.asd_factors: dict[str, B.AsdFactor] = {}
        self.dasd_heads: dict[str, B.DasdHead] = {}
        self.wsd_factors: dict[str, B.WsdFactor] = {}
        self.scale_params: dict[str, Parameter] = {}
        self.geoms: dict[str, ConvGeometry] = {}
        self._plan_cache: dict[tuple, BK.PackedConvPlan] = {}
        self._packed_bits: dict[str, BK.BitTensor] = {}
        self.export_alphas: dict[str, np.ndarray] = {}
        self.inference_only = False

    # -- construction -------------------------------------------------

    def _register(self, p: Parameter):
        self.params[p.name] = p

    def geometry(self, layer: LayerSpec) -> ConvGeometry:
        return ConvGeometry(layer.geti("in"), layer.geti("out"), layer.geti("k"),
                            stride=layer.geti("stride", 1), padding=layer.geti("pad", 0))


def build(spec: ModelSpec, seed: int = 0, ste: SteKind = SteKind.ClipSte,
          dtype=np.float32) -> Model:
    """Materialize parameters deterministically from the seed.

    Conv and linear weights are Kaiming-uniform; BN is (gamma=1, beta=0);
    all self-distribution raw parameters start at 0.
    """
    model = Model(spec, ste=ste, dtype=dtype)
    rng = np.random.default_rng(np.random.PCG64(seed))

    def kaiming(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, shape).astype(dtype)

    for layer in spec.layers:
        name = layer.name
        if layer.kind in ("conv", "binconv"):
            geom = model.geometry(layer)
            model.geoms[name] = geom
            k, cin, cout = geom.kernel, geom.in_channels, geom.out_channels
            w = Parameter(kaiming((cout, cin, k, k), cin * k * k), name=f"{name}.w",
                          kind="weight", binary_latent=(layer.kind == "binconv"))
            model._register(w)
            if layer.kind == "binconv":
                asd = layer.gets("asd", "off")
                if asd == "dynamic":
                    head = B.DasdHead(cin, re=layer.geti("re", 16), name=f"{name}.dasd",
                                      dtype=dtype, rng=rng)
                    model.dasd_heads[name] = head
                    for p in head.params():
                        model._register(p)
                elif asd != "off":
                    factor = B.AsdFactor(cin, form=B.AsdForm(asd), name=f"{name}.asd", dtype=dtype)
                    model.asd_factors[name] = factor
                    model._register(factor.raw)
                if layer.gets("wsd", "off") == "on":
                    f = B.WsdFactor(cout, name=f"{name}.wsd", dtype=dtype)
                    model.wsd_factors[name] = f
                    model._register(f.raw)
                if layer.gets("scale", "off") == "learned":
                    sc = Parameter(np.ones(cout, dtype=dtype), name=f"{name}.scale", kind="scale")
                    model.scale_params[name] = sc
                    model._register(sc)
        elif layer.kind == "linear":
            fin, fout = layer.geti("in"), layer.geti("out")
            model._register(Parameter(kaiming((fout, fin), fin), name=f"{name}.w", kind="weight"))
            model._register(Parameter(np.zeros(fout, dtype=dtype), name=f"{name}.b", kind="bias"))
        elif layer.kind == "bn":
            c = layer.geti("c")
            model._register(Parameter(np.ones(c, dtype=dtype), name=f"{name}.gamma", kind="bn_gamma"))
            model._register(Parameter(np.zeros(c, dtype=dtype), name=f"{name}.beta", kind="bn_beta"))
            model.bn_states[name] = ag.BatchNormState(c, dtype=dtype)
    return model


def _binconv_weight_node(model: Model, name: str, smooth: bool) -> Var:
    w = model.params[f"{name}.w"]
    wsd = model.wsd_factors.get(name)
    if wsd is not None:
        return B.wsd_node(w, wsd, model.ste, smooth=smooth)
    return ag.sign_ste(w, model.ste, smooth=smooth)


def binary_weight_signs(model: Model, name: str) -> np.ndarray:
    """Binarized weights with the weight shift folded in (numpy path)."""
    if model.inference_only:
        raise UnsupportedModeError("packed model holds no latent weights for binary layers")
    w = model.params[f"{name}.w"].data
    wsd = model.wsd_factors.get(name)
    if wsd is not None:
        _, w_b = B.wsd_apply(w, wsd)
        return w_b
    return B.sign01(w)


def forward(model: Model, images: np.ndarray, mode: str = "eval", path: str = "surrogate",
            smooth: bool = False, collect_stats: bool = False):
    """Run the network; returns logits (Var for surrogate, ndarray for packed).

    With collect_stats=True returns (logits, {layer: SignStats}) computed on
    each binary layer's shifted pre-binarization tensor.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if path == "packed":
        if mode == "train":
            raise UnsupportedModeError("packed path is inference-only; train on the surrogate path")
        return _forward_packed(model, images, collect_stats)
    if path != "surrogate":
        raise ValueError(f"unknown path {path!r}")
    if model.inference_only:
        raise UnsupportedModeError("model was loaded from a packed file; only the packed path is available")
    return _forward_surrogate(model, images, mode, smooth, collect_stats)


def _forward_surrogate(model: Model, images: np.ndarray, mode: str, smooth: bool,
                       collect_stats: bool):
    env: dict[str, Var] = {"input": ag.as_var(np.asarray(images, dtype=model.dtype))}
    stats: dict[str, B.SignStats] = {}
    training = mode == "train"
    out: Var | None = None
    for layer in model.spec.layers:
        name = layer.name
        x = env[layer.inputs[0]]
        if layer.kind == "conv":
            out = ag.conv2d(x, model.params[f"{name}.w"], model.geoms[name])
        elif layer.kind == "binconv":
            if name in model.dasd_heads:
                shifted, a_b = B.dasd_node(x, model.dasd_heads[name], model.ste, smooth=smooth)
            elif name in model.asd_factors:
                shifted, a_b = B.asd_node(x, model.asd_factors[name], model.ste, smooth=smooth)
            else:
                shifted, a_b = x, ag.sign_ste(x, model.ste, smooth=smooth)
            if collect_stats:
                stats[name] = B.sign_stats(shifted.data)
            w_b = _binconv_weight_node(model, name, smooth)
            out = ag.conv2d(a_b, w_b, model.geoms[name], pad_value=1.0)
            out = _apply_scale_surrogate(model, layer, out)
        elif layer.kind == "linear":
            out = ag.linear(x, model.params[f"{name}.w"], model.params[f"{name}.b"])
        elif layer.kind == "bn":
            out = ag.batchnorm2d(x, model.params[f"{name}.gamma"], model.params[f"{name}.beta"],
                                 model.bn_states[name], training=training)
        elif layer.kind == "act":
            fn = layer.gets("fn")
            if fn == "relu":
                out = ag.relu(x)
            elif fn == "hardtanh":
                out = ag.hardtanh(x)
            else:
                raise SpecError(f"unknown activation {fn!r}")
        elif layer.kind == "pool":
            out = ag.avg_pool2d(x, layer.geti("k"))
        elif layer.kind == "gap":
            out = ag.global_avg_pool(x)
        elif layer.kind == "flatten":
            out = ag.reshape(x, (x.data.shape[0], -1))
        elif layer.kind == "add":
            out = ag.add(x, env[layer.inputs[1]])
        elif layer.kind == "downsample":
            out = ag.downsample_pad(x, layer.geti("stride"), layer.geti("out"))
        env[name] = out
    if collect_stats:
        return out, stats
    return out


def _apply_scale_surrogate(model: Model, layer: LayerSpec, z: Var) -> Var:
    mode = layer.gets("scale", "off")
    if mode == "off":
        return z
    name = layer.name
    if mode == "learned":
        alpha = ag.reshape(model.scale_params[name], (1, -1, 1, 1))
        return ag.mul(z, alpha)
    # analytic factors are recomputed from the latent weights each forward
    # and treated as constants for the gradient
    w = model.params[f"{name}.w"].data
    alpha = np.abs(w.reshape(w.shape[0], -1)).mean(axis=1).astype(z.data.dtype)
    return ag.mul(z, alpha[None, :, None, None])


def _forward_packed(model: Model, images: np.ndarray, collect_stats: bool):
    env: dict[str, np.ndarray] = {"input": np.asarray(images, dtype=np.float32)}
    stats: dict[str, B.SignStats] = {}
    out: np.ndarray | None = None
    for layer in model.spec.layers:
        name = layer.name
        x = env[layer.inputs[0]]
        if layer.kind == "conv":
            out = T.conv2d_fast(x, model.params[f"{name}.w"].data.astype(np.float32, copy=False),
                                model.geoms[name])
        elif layer.kind == "binconv":
            out = _packed_binconv(model, layer, x, stats if collect_stats else None)
        elif layer.kind == "linear":
            out = T.linear(x, model.params[f"{name}.w"].data.astype(np.float32),
                           model.params[f"{name}.b"].data.astype(np.float32))
        elif layer.kind == "bn":
            st = model.bn_states[name]
            out, _, _ = T.batchnorm2d(x, model.params[f"{name}.gamma"].data.astype(np.float32),
                                      model.params[f"{name}.beta"].data.astype(np.float32),
                                      st.running_mean.astype(np.float32),
                                      st.running_var.astype(np.float32),
                                      eps=st.eps, mode="eval")
        elif layer.kind == "act":
            out = T.relu(x) if layer.gets("fn") == "relu" else T.hardtanh(x)
        elif layer.kind == "pool":
            out = T.avg_pool2d(x, layer.geti("k"))
        elif layer.kind == "gap":
            out = T.global_avg_pool(x)
        elif layer.kind == "flatten":
            out = x.reshape(x.shape[0], -1)
        elif layer.kind == "add":
            out = x + env[layer.inputs[1]]
        elif layer.kind == "downsample":
            stride, cout = layer.geti("stride"), layer.geti("out")
            sub = x[:, :, ::stride, ::stride]
            out = np.zeros((x.shape[0], cout) + sub.shape[2:], dtype=x.dtype)
            out[:, : x.shape[1]] = sub
        env[name] = out
    if collect_stats:
        return out, stats
    return out


def _packed_binconv(model: Model, layer: LayerSpec, x: np.ndarray, stats) -> np.ndarray:
    name = layer.name
    if name in model.dasd_heads:
        beta = model.dasd_heads[name].shift(x).astype(x.dtype)
        shifted = x + beta[:, :, None, None]
    elif name in model.asd_factors:
        shifted = x + model.asd_factors[name].effective().astype(x.dtype)[None, :, None, None]
    else:
        shifted = x
    if stats is not None:
        stats[name] = B.sign_stats(shifted)
    bits = model._packed_bits.get(name)
    if bits is None:
        bits = BK.pack(binary_weight_signs(model, name))
    geom = model.geoms[name]
    key = (tuple(shifted.shape), geom)
    plan = model._plan_cache.get(key)
    if plan is None:
        plan = BK.make_plan(shifted.shape, geom)
        model._plan_cache[key] = plan
    a_bits = BK.pack(shifted)
    mode = layer.gets("scale", "off")
    if mode == "off":
        return BK.bitconv2d(a_bits, bits, plan)
    if mode == "learned":
        alpha = model.scale_params[name].data.astype(np.float32)
        return BK.scaled_bitconv2d(a_bits, bits, plan, alpha, 1.0)
    alpha = model.export_alphas.get(name)
    if alpha is None:
        w = model.params[f"{name}.w"].data
        alpha = np.abs(w.reshape(w.shape[0], -1)).mean(axis=1).astype(np.float32)
    beta_mean = float(np.abs(x).mean())
    return BK.scaled_bitconv2d(a_bits, bits, plan, alpha, beta_mean)


def logits_shape_trace(model: Model, input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape of the network output for a given input shape (dry run)."""
    x = np.zeros(input_shape, dtype=np.float32)
    out = forward(model, x, mode="eval", path="surrogate")
    return tuple(out.data.shape)

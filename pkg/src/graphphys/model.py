"""Multi-task graph network: forward dynamics plus a flow posterior over mass.

Data flow for one batch (leading axis B, n particles):

    node features P, adjacency Â  -> node encoder          -> H_V
    relative tensor, Â            -> 1x1 mix + edge encoder -> H_E
    H_V                           -> type classifier        -> Ŷ,  H̃_V = H_V || Ŷ
    H_E                           -> inner-product decoder  -> Ĉ
    Ĉ || H̃_V || P                 -> per-axis decoders      -> next velocity / acceleration
    H̃_V                           -> hyper-map -> flow      -> log p(mass), samples Z_K
    Z_K                           -> bilinear decoder       -> R̂ (relative masses)

The total loss is the unweighted sum of every enabled head.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import flow
from .dataset import feature_width, n_types_of, relative_channels
from .errors import ConfigError, ContractError, DimensionError

FORMAT_VERSION = "1"
CONTACT_PRIOR_LOGIT = -4.0


@dataclass
class ModelConfig:
    system: str = "elastic2d"
    n_particles: int = 200
    k: int = 3
    hidden: int = 64
    layers: int = 2
    edge_hidden: int = 0           # 0 -> n_particles
    decoder_hidden: int = 64
    flow_layers: int = 3
    flow_components: int = 4
    bilinear_channels: int = 8
    invdec_hidden: int = 16
    use_classifier: bool = True
    use_contact: bool = True
    use_inverse: bool = True
    logmass_mean: float = 0.0
    logmass_std: float = 1.0
    relmass_scale: float = 1.0     # R is compared in units of this scale

    def __post_init__(self):
        if self.edge_hidden <= 0:
            self.edge_hidden = self.n_particles
        if self.n_types < 2:
            self.use_classifier = False
        if self.logmass_std <= 0:
            raise ConfigError("logmass_std must be positive")
        if self.relmass_scale <= 0:
            raise ConfigError("relmass_scale must be positive")

    @property
    def n_types(self):
        return n_types_of(self.system)

    @property
    def in_width(self):
        return feature_width(self.k)

    @property
    def channels(self):
        return relative_channels(self.k)

    @property
    def sigmoid_contact(self):
        return self.system == "elastic2d"

    @property
    def type_width(self):
        return self.n_types if self.use_classifier else 0

    @property
    def cond_width(self):
        return self.hidden + self.type_width

    @property
    def dec_in_width(self):
        w = self.in_width
        if self.use_contact:
            w += self.n_particles
        if self.use_classifier:
            w += self.cond_width
        return w

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


def _glorot(rng, d_in, d_out, gain=1.0):
    return rng.normal(0.0, gain * math.sqrt(2.0 / (d_in + d_out)), size=(d_in, d_out))


def init_params(cfg, seed=0, identity_flow=False):
    """Fresh parameters as an ordered dict name -> Tensor(requires_grad)."""
    rng = np.random.default_rng(seed)
    p = {}
    widths = [cfg.in_width] + [cfg.hidden] * cfg.layers
    for l in range(cfg.layers):
        p[f"node_W{l}"] = _glorot(rng, widths[l], widths[l + 1], gain=0.5)
    p["edge_mix"] = rng.normal(0.0, 0.1 / math.sqrt(cfg.channels), size=(1, cfg.channels))
    ew = [cfg.n_particles] + [cfg.edge_hidden] * cfg.layers
    for l in range(cfg.layers):
        p[f"edge_W{l}"] = _glorot(rng, ew[l], ew[l + 1], gain=0.5)
    if cfg.sigmoid_contact:
        # contacts are rare: start the offset at a low prior probability
        p["contact_b"] = np.full((), CONTACT_PRIOR_LOGIT)
    if cfg.use_classifier:
        out = 1 if cfg.n_types == 2 else cfg.n_types
        p["cls_W"] = _glorot(rng, cfg.hidden, out)
    for d in range(2):
        p[f"dec{d}_W0"] = _glorot(rng, cfg.dec_in_width, cfg.decoder_hidden)
        p[f"dec{d}_b0"] = np.zeros(cfg.decoder_hidden)
        p[f"dec{d}_W1"] = _glorot(rng, cfg.decoder_hidden, 1)
        p[f"dec{d}_b1"] = np.zeros(1)
    if cfg.use_inverse:
        K, J = cfg.flow_layers, cfg.flow_components
        p["hyper_W"] = rng.normal(0.0, 0.01 / math.sqrt(cfg.cond_width), size=(cfg.cond_width, 3 * K * J))
        bias = np.zeros(3 * K * J)
        if not identity_flow:
            for k in range(K):
                bias[3 * J * k + J:3 * J * k + 2 * J] = np.linspace(-1.0, 1.0, J)
        else:
            p["hyper_W"][:] = 0.0
        p["hyper_b"] = bias
        p["bil_W"] = rng.normal(0.0, 0.5, size=(cfg.bilinear_channels, 2, 2))
        p["inv_W2"] = _glorot(rng, cfg.bilinear_channels, cfg.invdec_hidden)
        p["inv_b2"] = np.zeros(cfg.invdec_hidden)
        p["inv_W3"] = _glorot(rng, cfg.invdec_hidden, 1)
        p["inv_b3"] = np.ones(1)
    return {name: ad.parameter(v) for name, v in p.items()}


def frozen(params):
    """Constant copies: evaluation builds no tape and cannot touch weights."""
    return {name: ad.constant(t.data.copy()) for name, t in params.items()}


# --------------------------------------------------------------------------- #
# encoder

def _embed(d_in, d_out):
    """Fixed identity embedding that zero-pads or truncates the residual width."""
    if d_in == d_out:
        return None
    e = np.zeros((d_in, d_out))
    m = min(d_in, d_out)
    e[np.arange(m), np.arange(m)] = 1.0
    return ad.constant(e)


def graph_layer(adj, h, W):
    """Raw-residual graph convolution: relu(Â H W + Â H)."""
    agg = ad.matmul(adj, h)
    embed = _embed(h.shape[-1], W.shape[-1])
    res = agg if embed is None else ad.matmul(agg, embed)
    return ad.relu(ad.add(ad.matmul(agg, W), res))


def encode_nodes(adj, feats, params, cfg):
    adj, h = ad._lift(adj), ad._lift(feats)
    if adj.shape[-1] != h.shape[-2] or adj.shape[-2] != adj.shape[-1]:
        raise DimensionError(f"encode_nodes: adjacency {adj.shape} vs features {h.shape}")
    for l in range(cfg.layers):
        h = graph_layer(adj, h, params[f"node_W{l}"])
    return h


def mix_channels(relative, mix):
    """1x1 convolution over the channel axis: (..., C, n, n) -> (..., n, n)."""
    rel = ad._lift(relative)
    C, n = rel.shape[-3], rel.shape[-1]
    if mix.shape != (1, C):
        raise DimensionError(f"mix_channels: {C} channels but mix weights {mix.shape}")
    lead = rel.shape[:-3]
    flat = ad.reshape(rel, lead + (C, n * n))
    return ad.reshape(ad.matmul(mix, flat), lead + (n, n))


def encode_edges(adj, relative, params, cfg):
    rel = ad._lift(relative)
    if rel.shape[-3] != cfg.channels:
        raise DimensionError(f"encode_edges: expected {cfg.channels} channels, got {rel.shape[-3]}")
    h = mix_channels(rel, params["edge_mix"])
    adj = ad._lift(adj)
    for l in range(cfg.layers):
        h = graph_layer(adj, h, params[f"edge_W{l}"])
    return h


# --------------------------------------------------------------------------- #
# processor

def classify(h_v, types, params, cfg):
    """Type probabilities Ŷ, summed cross-entropy (batch-averaged), and H̃_V."""
    if not cfg.use_classifier:
        raise ContractError("classifier head is disabled for this dataset")
    s = ad.matmul(h_v, params["cls_W"])
    if cfg.n_types == 2:
        log_y = ad.concat_cols(ad.logsigmoid(ad.neg(s)), ad.logsigmoid(s))
        y_hat = ad.concat_cols(ad.sigmoid(ad.neg(s)), ad.sigmoid(s))
    else:
        log_y = ad.log_softmax_rows(s)
        y_hat = ad.softmax_rows(s)
    loss = None
    if types is not None:
        batch = y_hat.data.size // y_hat.shape[-1] // y_hat.shape[-2]
        loss = ad.mul(ad.sum(ad.mul(ad._lift(types), log_y)), -1.0 / batch)
    return y_hat, loss, ad.concat_cols(h_v, y_hat)


def row_mse(target, pred):
    """(1/|V|) sum_i ||target_i - pred_i||^2, averaged over any batch axes."""
    diff = ad.sub(ad._lift(target), pred)
    rows = pred.data.size // pred.shape[-1]
    return ad.mul(ad.sum(ad.square(diff)), 1.0 / rows)


def contact_head(h_e, contact, cfg, params=None):
    """Inner-product decoder Ĉ = H_E H_Eᵀ.

    For direct contact the logits get a learned scalar offset before the
    sigmoid: H_E is post-rectifier, so without it every entry would sit at
    or above 0.5.
    """
    c_raw = ad.matmul(h_e, ad.transpose(h_e))
    if cfg.sigmoid_contact:
        if params is not None and "contact_b" in params:
            c_raw = ad.add(c_raw, params["contact_b"])
        c_hat = ad.sigmoid(c_raw)
    else:
        c_hat = c_raw
    loss = row_mse(contact, c_hat) if contact is not None else None
    return c_hat, loss


def assemble_decoder_input(c_hat, h_tilde_v, feats, cfg):
    parts = []
    if cfg.use_contact:
        parts.append(c_hat)
    if cfg.use_classifier:
        parts.append(h_tilde_v)
    parts.append(ad._lift(feats))
    return ad.concat_cols(*parts)


def forward_decode(h_cv, target, params, cfg):
    """One two-layer decoder per spatial axis; returns (|V| x 2 prediction, loss)."""
    outs = []
    for d in range(2):
        h = ad.relu(ad.add(ad.matmul(h_cv, params[f"dec{d}_W0"]), params[f"dec{d}_b0"]))
        outs.append(ad.add(ad.matmul(h, params[f"dec{d}_W1"]), params[f"dec{d}_b1"]))
    pred = ad.concat_cols(*outs)
    loss = row_mse(target, pred) if target is not None else None
    return pred, loss


# --------------------------------------------------------------------------- #
# inverse model

def flow_layers(h_tilde_v, params, cfg):
    theta = ad.add(ad.matmul(h_tilde_v, params["hyper_W"]), params["hyper_b"])
    return flow.layers_from_raw(theta, cfg.flow_layers, cfg.flow_components)


def standardize_mass(masses, cfg):
    return (np.log(masses) - cfg.logmass_mean) / cfg.logmass_std


def destandardize_mass(z, cfg):
    return np.exp(np.asarray(z) * cfg.logmass_std + cfg.logmass_mean)


def flow_logprob(masses, layers, cfg):
    """Per-particle log p(z_K) at the observed masses and the mean NLL."""
    z = standardize_mass(np.asarray(masses, dtype=np.float64), cfg)[..., None]
    logp = flow.log_prob(ad.constant(z), layers)
    return logp, ad.mul(ad.sum(logp), -1.0 / logp.data.size)


def flow_sample(layers, z0):
    """Reparameterized samples Z_K (..., n, 1) from base noise z0."""
    z_k, _ = flow.sample(ad._lift(z0), layers)
    return z_k


def inverse_decode(z_k, relmass, params, cfg):
    """R̂ = linear(linear(relu(bilinear(Z_K)))) per pair; returns (R̂, loss).

    The network works in units of ``cfg.relmass_scale`` and so does the
    loss, which keeps ratios spanning orders of magnitude from swamping the
    other heads.
    """
    lead = z_k.shape[:-1]
    n = lead[-1]
    # augmenting with a constant 1 gives each channel linear and bias terms too
    z_aug = ad.concat_cols(z_k, ad.constant(np.ones(lead + (1,))))
    h = ad.relu(ad.bilinear(z_aug, params["bil_W"], z_aug))
    h = ad.reshape(h, lead[:-1] + (n * n, cfg.bilinear_channels))
    # the two linear layers are composed before touching the n*n pair rows
    w23 = ad.matmul(params["inv_W2"], params["inv_W3"])
    b23 = ad.add(ad.matmul(ad.reshape(params["inv_b2"], (1, cfg.invdec_hidden)), params["inv_W3"]),
                 params["inv_b3"])
    h = ad.add(ad.matmul(h, w23), ad.reshape(b23, (1,)))
    r_unit = ad.reshape(h, lead[:-1] + (n, n))
    scale = cfg.relmass_scale
    loss = row_mse(np.asarray(relmass) / scale, r_unit) if relmass is not None else None
    return ad.mul(r_unit, scale), loss


# --------------------------------------------------------------------------- #

@dataclass
class Outputs:
    losses: dict
    total: ad.Tensor
    pred: ad.Tensor
    y_hat: ad.Tensor = None
    c_hat: ad.Tensor = None
    h_tilde_v: ad.Tensor = None
    z_k: ad.Tensor = None
    r_hat: ad.Tensor = None
    logp: ad.Tensor = None


def run_model(batch, params, cfg, z0=None, with_losses=True):
    """Full forward pass on a stacked batch (see ``dataset.stack``)."""
    adj, feats = batch["adjacency"], batch["node_features"]
    get = (lambda key: batch[key]) if with_losses else (lambda key: None)
    losses = {}
    h_v = encode_nodes(adj, feats, params, cfg)
    y_hat = None
    if cfg.use_classifier:
        y_hat, l_cls, h_tilde_v = classify(h_v, get("types"), params, cfg)
        losses["classification"] = l_cls
    else:
        h_tilde_v = h_v
    c_hat = None
    if cfg.use_contact:
        h_e = encode_edges(adj, batch["relative"], params, cfg)
        c_hat, losses["collision"] = contact_head(h_e, get("contact"), cfg, params)
    h_cv = assemble_decoder_input(c_hat, h_tilde_v, feats, cfg)
    pred, losses["dec"] = forward_decode(h_cv, get("forward_target"), params, cfg)
    z_k = r_hat = logp = None
    if cfg.use_inverse:
        layers = flow_layers(h_tilde_v, params, cfg)
        if with_losses:
            logp, losses["flow"] = flow_logprob(batch["masses"], layers, cfg)
        if z0 is not None:
            z_k = flow_sample(layers, z0)
            r_hat, losses["inv_dec"] = inverse_decode(z_k, get("relmass"), params, cfg)
    total = None
    if with_losses:
        for term in losses.values():
            if term is not None:
                total = term if total is None else ad.add(total, term)
    return Outputs(losses=losses, total=total, pred=pred, y_hat=y_hat, c_hat=c_hat,
                   h_tilde_v=h_tilde_v, z_k=z_k, r_hat=r_hat, logp=logp)


def total_loss(batch, params, cfg, z0):
    """Unweighted sum of inverse (flow NLL + R̂ error), decoder, contact and type losses."""
    return run_model(batch, params, cfg, z0=z0).total


# --------------------------------------------------------------------------- #
# checkpoints

def save_checkpoint(path, params, cfg, extra=None, buffers=None):
    """Write ``manifest.json`` + ``params.f64le`` (tensors concatenated in manifest order)."""
    os.makedirs(path, exist_ok=True)
    buffers = buffers or {}
    entries = [{"name": k, "shape": list(v.shape), "trainable": True} for k, v in params.items()]
    entries += [{"name": k, "shape": list(np.shape(v)), "trainable": False} for k, v in buffers.items()]
    manifest = {"format_version": FORMAT_VERSION, "config": asdict(cfg), "tensors": entries,
                "extra": extra or {}}
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, "params.f64le"), "wb") as fh:
        for k, v in params.items():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        for k, v in buffers.items():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, cfg, extra, buffers)."""
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format {manifest.get('format_version')!r}")
    cfg = ModelConfig(**manifest["config"])
    raw = np.fromfile(os.path.join(path, "params.f64le"), dtype="<f8").astype(np.float64)
    params, buffers, pos = {}, {}, 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = raw[pos:pos + count].reshape(shape)
        pos += count
        if entry["trainable"]:
            params[entry["name"]] = ad.parameter(arr)
        else:
            buffers[entry["name"]] = arr
    if pos != raw.size:
        raise ConfigError(f"{path}: params.f64le has {raw.size} values, manifest lists {pos}")
    return params, cfg, manifest.get("extra", {}), buffers

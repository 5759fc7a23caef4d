"""HGWaveNet assembly: per-snapshot forward pass, decoder, losses and checkpoints."""
from __future__ import annotations

import json
import zlib
from collections import OrderedDict, deque
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .graph_data import DiffusionStack, Snapshot, build_diffusion_stack
from .layers import (GatedLayerParams, HDGCLayerParams, HGRUParams, _csr_parts, attention_pool_history,
                     dilation_schedule, gated_hdcc_stack, hdgc_forward, hgru_cell)
from .manifold import Curvature, curvature_value, geometry

PROB_CLAMP = 1e-12


class CheckpointError(ValueError):
    pass


def _rng(seed: int, component: str):
    # one stream per component, so ablating one part leaves the others' init untouched
    return np.random.default_rng([seed, zlib.crc32(component.encode())])


def _glorot(rng, shape):
    lim = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-lim, lim, size=shape)


class HGWaveNet:
    """Holds every trainable tensor by name plus the structural config."""

    def __init__(self, num_nodes: int, config: RunConfig):
        self.config = config
        self.num_nodes = num_nodes
        self.geom = geometry(config.euclidean)
        self.params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
        d = config.dim
        raw_one = Curvature.raw_for(1.0)

        def add(name, value):
            t = ad.Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
            self.params[name] = t
            return t

        add("embeddings", _rng(config.seed_init, "embeddings").normal(0.0, 0.1, size=(num_nodes, d)))
        # one curvature for every ball that is only entered by exp0 and left by
        # log0 (embeddings, layer outputs, history, HGRU output); see notes
        self.c_temporal = add("c_temporal", raw_one)
        steps = 1 if config.no_hdgc else config.K + 1
        n_layers = 1 if config.no_hdgc else config.L
        self.hdgc = []
        rng = _rng(config.seed_init, "hdgc")
        for l in range(n_layers):
            W, b, cs = [], [], []
            for k in range(steps):
                W.append(add(f"hdgc.{l}.W{k}", _glorot(rng, (d, d))))
                b.append(add(f"hdgc.{l}.b{k}", rng.uniform(-1, 1, size=d) / np.sqrt(d)))
                cs.append(add(f"hdgc.{l}.c{k}", raw_one))
            a_nbr = add(f"hdgc.{l}.a_nbr", rng.normal(0.0, 0.1, size=2 * d))
            a_step = add(f"hdgc.{l}.a_step", rng.normal(0.0, 0.1, size=d))
            self.hdgc.append(HDGCLayerParams(W, b, cs, a_nbr, a_step, self.c_temporal))
        self.temporal = []
        rng = _rng(config.seed_init, "temporal")
        if config.no_hdcc:
            self.a_hist = add("hist.a", rng.normal(0.0, 0.1, size=d))
        else:
            lim = 1.0 / np.sqrt(config.S)
            for i, dil in enumerate(dilation_schedule(config.layers, config.S, config.D)):
                f = add(f"hdcc.{i}.filt", rng.uniform(-lim, lim, size=(config.S, d)))
                g = add(f"hdcc.{i}.gate", rng.uniform(-lim, lim, size=(config.S, d)))
                self.temporal.append(GatedLayerParams(f, g, dil))
        lim = 1.0 / np.sqrt(d)
        rng = _rng(config.seed_init, "hgru")
        gru = {}
        for gate in ("z", "r", "h"):
            gru[f"W{gate}"] = add(f"hgru.W{gate}", rng.uniform(-lim, lim, size=(d, d)))
            gru[f"U{gate}"] = add(f"hgru.U{gate}", rng.uniform(-lim, lim, size=(d, d)))
            gru[f"b{gate}"] = add(f"hgru.b{gate}", rng.uniform(-lim, lim, size=d))
        self.hgru = HGRUParams(**gru)

    # ------------------------------------------------------------------ structure

    @property
    def window(self) -> int:
        return self.config.window

    def diffusion_stack(self, snapshot: Snapshot) -> DiffusionStack:
        if self.config.no_hdgc:
            full = build_diffusion_stack(snapshot, 1)
            return DiffusionStack([full.powers[1]])
        return build_diffusion_stack(snapshot, self.config.K)

    def prepare(self, stack: DiffusionStack):
        """CSR index arrays for each power, computed once per snapshot."""
        return [_csr_parts(a) for a in stack.powers]

    def new_buffer(self) -> "HistoryBuffer":
        rng = _rng(self.config.seed_init, "padding")
        return HistoryBuffer(self.window, self.num_nodes, self.config.dim, self.config.padding, rng,
                             self.geom, float(curvature_value(self.c_temporal.value)))

    # ------------------------------------------------------------------ forward

    def embed(self):
        return self.geom.exp0(self.params["embeddings"], curvature_value(self.c_temporal))

    def temporal_state(self, buffer: "HistoryBuffer"):
        c_t = curvature_value(self.c_temporal)
        P = buffer.sequence()
        if self.config.no_hdcc:
            return attention_pool_history(P, self.a_hist, c_t, self.geom)
        return gated_hdcc_stack(P, self.temporal, c_t, self.geom)

    def forward_snapshot(self, stack: DiffusionStack, buffer: "HistoryBuffer", parts=None):
        """Spatial HDGC + temporal gated HDCC fused by one HGRU step; pushes the result."""
        c_e = curvature_value(self.c_temporal)
        X, c_x = hdgc_forward(stack, self.embed(), self.hdgc, c_e, self.geom, parts)
        H = self.temporal_state(buffer)
        c_t = curvature_value(self.c_temporal)
        Z = hgru_cell(X, H, self.hgru, c_x, c_t, c_t, self.geom)
        buffer.push(Z)
        return Z

    def curvature(self):
        return curvature_value(self.c_temporal)

    # ------------------------------------------------------------------ io

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise CheckpointError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            if self.params[k].value.shape != np.shape(v):
                raise CheckpointError(f"{k}: shape {np.shape(v)} != expected {self.params[k].value.shape}")
            self.params[k].value = np.array(v, dtype=np.float64)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.value).tobytes())
        return h.hexdigest()


class HistoryBuffer:
    """The last ``window`` node-representation matrices, most recent first.

    Empty slots hold origin matrices, or seeded random ball points when
    ``padding == "random"``.
    """

    def __init__(self, window: int, num_nodes: int, dim: int, padding: str = "origin",
                 rng=None, geom=None, c: float = 1.0):
        self.window = window
        self.entries: deque = deque(maxlen=window)
        for _ in range(window):
            if padding == "random":
                v = (rng or np.random.default_rng(0)).normal(0.0, 0.1, size=(num_nodes, dim))
                self.entries.append(ad.value(geom.exp0(v, c)) if geom is not None else v)
            else:
                self.entries.append(np.zeros((num_nodes, dim)))

    def push(self, Z) -> None:
        self.entries.appendleft(Z)

    def latest(self):
        return self.entries[0]

    def sequence(self):
        """Chronological ``(window, N, d)`` stack (oldest first)."""
        return ad.stack(list(reversed(self.entries)), axis=0)

    def detached(self) -> "HistoryBuffer":
        out = HistoryBuffer.__new__(HistoryBuffer)
        out.window = self.window
        out.entries = deque((ad.value(e) for e in self.entries), maxlen=self.window)
        return out


# ----------------------------------------------------------------------------- decoder and losses

def fermi_dirac_score(x, y, r: float, s: float, c, geom=None):
    from .manifold import PoincareGeometry
    geom = geom or PoincareGeometry
    d = geom.dist(x, y, c)
    return ad.sigmoid(ad.div(ad.sub(r, d), s))


def edge_scores(Z, pairs, r, s, c, geom=None):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    p = fermi_dirac_score(ad.take(Z, pairs[:, 0]), ad.take(Z, pairs[:, 1]), r, s, c, geom)
    return ad.reshape(p, (len(pairs),))


def cross_entropy_loss(Z, batch, r: float, s: float, c, geom=None):
    if len(batch.positives) == 0:
        raise ValueError("cross_entropy_loss needs at least one positive edge")
    p_pos = ad.clip(edge_scores(Z, batch.positives, r, s, c, geom), PROB_CLAMP, 1 - PROB_CLAMP)
    loss = ad.neg(ad.mean(ad.log(p_pos)))
    if len(batch.negatives):
        p_neg = ad.clip(edge_scores(Z, batch.negatives, r, s, c, geom), PROB_CLAMP, 1 - PROB_CLAMP)
        loss = ad.sub(loss, ad.mean(ad.log(ad.sub(1.0, p_neg))))
    return loss


def htc_loss(Z_prev, Z_curr, c, geom=None):
    from .manifold import PoincareGeometry
    geom = geom or PoincareGeometry
    return ad.mean(geom.dist(Z_prev, Z_curr, c))


def total_loss(ce_terms, htc_terms, lam: float):
    if len(ce_terms) != len(htc_terms):
        raise ValueError("ce and htc lists must have equal length")
    total = 0.0
    for ce, htc in zip(ce_terms, htc_terms):
        total = ad.add(total, ad.add(ce, ad.mul(lam, htc)))
    return total


# ----------------------------------------------------------------------------- checkpoints

def save_checkpoint(model: HGWaveNet, path) -> Path:
    path = Path(path)
    meta = {"num_nodes": model.num_nodes, "config": model.config.to_text(),
            "shapes": {k: list(v.value.shape) for k, v in model.params.items()}}
    arrays = {f"param:{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path, config: RunConfig | None = None) -> HGWaveNet:
    """Rebuild a model from a checkpoint; ``config`` (if given) must agree on dimensions."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        state = {k[len("param:"):]: z[k] for k in z.files if k.startswith("param:")}
    saved = RunConfig.from_text(meta["config"])
    if config is not None:
        for key in ("dim", "K", "L", "S", "D", "layers", "no_hdgc", "no_hdcc", "euclidean"):
            if getattr(config, key) != getattr(saved, key):
                raise CheckpointError(
                    f"{key}: checkpoint has {getattr(saved, key)}, config has {getattr(config, key)}")
    model = HGWaveNet(meta["num_nodes"], saved)
    model.load_state_dict(state)
    return model

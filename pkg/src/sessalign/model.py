"""Encoder, phoneme classifier and multi-head domain classifier.

Parameters live in one :class:`ParamStore` under three name prefixes that
form an exact partition: ``enc.`` (feature encoder), ``pho.`` (phoneme
classifier) and ``dom.`` (domain classifier).  Each group is initialised
from its own random stream, so building or omitting domain heads never
changes the encoder or phoneme weights.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .datagen import substream

GROUPS = ("enc.", "pho.", "dom.")


@dataclass
class EncoderConfig:
    n_channels: int = 16
    vocab_size: int = 9
    patch_len: int = 5
    embed_dim: int = 64
    depth: int = 3
    block: str = "attention"
    heads: int = 4
    mlp_ratio: int = 2
    dropout: float = 0.35
    input_dropout: float = 0.2
    rep_layer_index: int = 1
    n_domain_heads: int = 0
    disc_hidden_dim: int = 64
    domain_dropout: float = 0.0
    binary_loss: bool = True
    domain_pooling: str = "mean"
    day_layers: list = field(default_factory=list)

    def validate(self):
        if self.patch_len < 1:
            raise ValueError("patch_len must be >= 1")
        if not 0 <= self.rep_layer_index < self.depth:
            raise ValueError(f"rep_layer_index must be in [0, {self.depth})")
        if self.block not in ("attention", "recurrent"):
            raise ValueError(f"unknown block kind {self.block!r}")
        if self.block == "attention" and self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.domain_pooling not in ("mean", "none"):
            raise ValueError(f"unknown domain_pooling {self.domain_pooling!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class LatentSeq:
    layers: list            # per-block (B, P, D) tensors
    lengths: list           # valid patch count per trial
    mask: np.ndarray        # (B, P) bool

    @property
    def final(self) -> dc.Tensor:
        return self.layers[-1]


def _init(rng, fan_in, shape):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def sinusoidal_positions(P: int, D: int) -> np.ndarray:
    pos = np.arange(P)[:, None]
    i = np.arange((D + 1) // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / D))
    pe = np.zeros((P, D))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : D // 2])
    return pe


def route(session_ids, splits, source_sessions) -> list[tuple[list[int], list[int]]]:
    """Per-head (source rows, target rows) of a mixed batch.

    Head ``i`` gets the rows from source session ``source_sessions[i]`` plus
    every target row.
    """
    head_of = {s: i for i, s in enumerate(source_sessions)}
    src = [[] for _ in source_sessions]
    tgt = []
    for row, (sid, split) in enumerate(zip(session_ids, splits)):
        if split == "source":
            if sid not in head_of:
                raise KeyError(f"source row {row} has unknown session id {sid}")
            src[head_of[sid]].append(row)
        elif split == "target":
            tgt.append(row)
        else:
            raise ValueError(f"row {row}: split {split!r} cannot be routed")
    return [(s, list(tgt)) for s in src]


class AlignModel:
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg.validate()
        self.seed = seed
        self.store = dc.ParamStore()
        self._build_encoder(substream(seed, "init", "enc"))
        self._build_phoneme_head(substream(seed, "init", "pho"))
        if cfg.n_domain_heads:
            self._build_domain(substream(seed, "init", "dom"))

    # ------------------------------------------------------------ parameters

    def _p(self, name, value):
        return self.store.add(name, value)

    def _build_encoder(self, rng):
        c, p, D = self.cfg.n_channels, self.cfg.patch_len, self.cfg.embed_dim
        if self.cfg.day_layers:
            n = len(self.cfg.day_layers)
            self._p("enc.day.W", np.repeat(np.eye(c)[None], n, axis=0))
            self._p("enc.day.b", np.zeros((n, c)))
        self._p("enc.in_ln.g", np.ones(p * c))
        self._p("enc.in_ln.b", np.zeros(p * c))
        self._p("enc.embed.W", _init(rng, p * c, (p * c, D)))
        self._p("enc.embed.b", np.zeros(D))
        self._p("enc.emb_ln.g", np.ones(D))
        self._p("enc.emb_ln.b", np.zeros(D))
        for l in range(self.cfg.depth):
            pre = f"enc.block{l}."
            if self.cfg.block == "attention":
                H = D * self.cfg.mlp_ratio
                for nm in ("ln1", "ln2"):
                    self._p(pre + nm + ".g", np.ones(D))
                    self._p(pre + nm + ".b", np.zeros(D))
                for nm in ("q", "k", "v", "o"):
                    self._p(pre + nm + ".W", _init(rng, D, (D, D)))
                    self._p(pre + nm + ".b", np.zeros(D))
                self._p(pre + "fc1.W", _init(rng, D, (D, H)))
                self._p(pre + "fc1.b", np.zeros(H))
                self._p(pre + "fc2.W", _init(rng, H, (H, D)))
                self._p(pre + "fc2.b", np.zeros(D))
            else:
                self._p(pre + "Wx", _init(rng, D, (D, 3 * D)))
                self._p(pre + "Wh", _init(rng, D, (D, 3 * D)))
                self._p(pre + "bx", np.zeros(3 * D))
                self._p(pre + "bh", np.zeros(3 * D))
        self._p("enc.out_ln.g", np.ones(D))
        self._p("enc.out_ln.b", np.zeros(D))

    def _build_phoneme_head(self, rng):
        D, V = self.cfg.embed_dim, self.cfg.vocab_size
        self._p("pho.W", _init(rng, D, (D, V)))
        self._p("pho.b", np.zeros(V))

    def _build_domain(self, rng):
        D, h, m = self.cfg.embed_dim, self.cfg.disc_hidden_dim, self.cfg.n_domain_heads
        heads = [f"dom.{i}." for i in range(m)] if self.cfg.binary_loss else ["dom.mc."]
        out = 1 if self.cfg.binary_loss else m + 1
        for pre in heads:
            self._p(pre + "W1", _init(rng, D, (D, h)))
            self._p(pre + "b1", np.zeros(h))
            self._p(pre + "W2", _init(rng, h, (h, h)))
            self._p(pre + "b2", np.zeros(h))
            self._p(pre + "W3", _init(rng, h, (h, out)))
            self._p(pre + "b3", np.zeros(out))

    def group(self, prefix: str) -> list[dc.Tensor]:
        return [self.store[n] for n in self.store.names(prefix)]

    # ---------------------------------------------------------------- encoder

    def _day_index(self, sid):
        days = self.cfg.day_layers
        if sid in days:
            return days.index(sid)
        # unseen session: reuse the most recent earlier day's transform
        earlier = [i for i, d in enumerate(days) if d <= sid]
        return earlier[-1] if earlier else 0

    def encode(self, features, session_ids=None, train: bool = False,
               rng: np.random.Generator | None = None) -> LatentSeq:
        cfg = self.cfg
        B = len(features)
        lengths_t = [f.shape[0] for f in features]
        Tmax = max(lengths_t)
        X = np.zeros((B, Tmax, cfg.n_channels))
        for b, f in enumerate(features):
            if f.shape[1] != cfg.n_channels:
                raise dc.ShapeError("encode", f.shape, (None, cfg.n_channels))
            X[b, : f.shape[0]] = f
        x = dc.const(X)
        if cfg.day_layers:
            idx = [self._day_index(s) for s in session_ids]
            W = dc.take(self.store["enc.day.W"], idx)
            bias = dc.reshape(dc.take(self.store["enc.day.b"], idx), (B, 1, cfg.n_channels))
            x = dc.add(dc.matmul(x, W), bias)
        p = cfg.patch_len
        lengths = [-(-T // p) for T in lengths_t]
        x = dc.patchify(x, p)
        P = x.shape[1]
        mask = np.arange(P)[None, :] < np.array(lengths)[:, None]
        s = self.store
        x = dc.layer_norm(x, s["enc.in_ln.g"], s["enc.in_ln.b"])
        x = dc.affine(x, s["enc.embed.W"], s["enc.embed.b"])
        x = dc.layer_norm(x, s["enc.emb_ln.g"], s["enc.emb_ln.b"])
        x = dc.dropout(x, cfg.input_dropout, rng, train)
        if cfg.block == "attention":
            x = dc.add(x, dc.const(sinusoidal_positions(P, cfg.embed_dim)))
        layers = []
        for l in range(cfg.depth):
            if cfg.block == "attention":
                x = self._attention_block(x, l, train, rng)
            else:
                x = self._recurrent_block(x, l, train, rng)
            if not np.all(np.isfinite(x.data)):
                raise dc.NumericalError(f"non-finite activations after encoder block {l}")
            layers.append(x)
        return LatentSeq(layers, lengths, mask)

    def _attention_block(self, x, l, train, rng):
        s = self.store
        pre = f"enc.block{l}."
        B, P, D = x.shape
        H = self.cfg.heads
        dh = D // H
        h = dc.layer_norm(x, s[pre + "ln1.g"], s[pre + "ln1.b"])

        def split(t):
            return dc.transpose(dc.reshape(t, (B, P, H, dh)), (0, 2, 1, 3))

        q = split(dc.affine(h, s[pre + "q.W"], s[pre + "q.b"]))
        k = split(dc.affine(h, s[pre + "k.W"], s[pre + "k.b"]))
        v = split(dc.affine(h, s[pre + "v.W"], s[pre + "v.b"]))
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        causal = np.tril(np.ones((P, P), dtype=bool))
        att = dc.softmax(scores, axis=-1, mask=causal)
        ctx = dc.reshape(dc.transpose(dc.matmul(att, v), (0, 2, 1, 3)), (B, P, D))
        ctx = dc.affine(ctx, s[pre + "o.W"], s[pre + "o.b"])
        x = dc.add(x, dc.dropout(ctx, self.cfg.dropout, rng, train))
        h = dc.layer_norm(x, s[pre + "ln2.g"], s[pre + "ln2.b"])
        h = dc.relu(dc.affine(h, s[pre + "fc1.W"], s[pre + "fc1.b"]))
        h = dc.affine(h, s[pre + "fc2.W"], s[pre + "fc2.b"])
        return dc.add(x, dc.dropout(h, self.cfg.dropout, rng, train))

    def _recurrent_block(self, x, l, train, rng):
        s = self.store
        pre = f"enc.block{l}."
        B, P, D = x.shape
        h = dc.const(np.zeros((B, D)))
        outs = []
        for t in range(P):
            h = dc.gru_cell(dc.select(x, t, axis=1), h, s[pre + "Wx"], s[pre + "Wh"],
                            s[pre + "bx"], s[pre + "bh"])
            outs.append(h)
        return dc.dropout(dc.stack(outs, axis=1), self.cfg.dropout, rng, train)

    # ------------------------------------------------------------------ heads

    def phoneme_logits(self, latent: LatentSeq) -> dc.Tensor:
        s = self.store
        z = dc.layer_norm(latent.final, s["enc.out_ln.g"], s["enc.out_ln.b"])
        return dc.affine(z, s["pho.W"], s["pho.b"])

    def rep(self, latent: LatentSeq) -> dc.Tensor:
        return latent.layers[self.cfg.rep_layer_index]

    def domain_head(self, z: dc.Tensor, head: int, train=False, rng=None) -> dc.Tensor:
        """Raw head output per timestep, (B, P, out)."""
        m = self.cfg.n_domain_heads
        if not 0 <= head < max(m, 1) or not m:
            raise IndexError(f"domain head {head} out of range (m={m})")
        pre = f"dom.{head}." if self.cfg.binary_loss else "dom.mc."
        s = self.store
        p = self.cfg.domain_dropout
        h = dc.relu(dc.affine(z, s[pre + "W1"], s[pre + "b1"]))
        h = dc.dropout(h, p, rng, train)
        h = dc.relu(dc.affine(h, s[pre + "W2"], s[pre + "b2"]))
        h = dc.dropout(h, p, rng, train)
        return dc.affine(h, s[pre + "W3"], s[pre + "b3"])

    def domain_logit(self, z: dc.Tensor, mask, head: int, train=False, rng=None) -> dc.Tensor:
        """Binary head ``head`` on already-reversed latents ``z`` (B, P, D).

        Returns one logit per trial (masked mean over time) or, with
        ``domain_pooling == "none"``, the (B, P) per-timestep logits.
        """
        out = self.domain_head(z, head, train, rng)
        B, P, _ = out.shape
        logits = dc.reshape(out, (B, P))
        if self.cfg.domain_pooling == "none":
            return logits
        return dc.mean_pool(logits, mask)

    # -------------------------------------------------------------- inference

    def log_probs(self, features, session_ids=None) -> list[np.ndarray]:
        """Per-trial (n_patches, V) log-probabilities, dropout off."""
        out = []
        for start in range(0, len(features), 32):
            chunk = features[start:start + 32]
            sids = None if session_ids is None else session_ids[start:start + 32]
            lat = self.encode(chunk, sids, train=False)
            z = self.phoneme_logits(lat).data
            for b, n in enumerate(lat.lengths):
                zb = z[b, :n]
                m = zb.max(axis=1, keepdims=True)
                out.append(zb - m - np.log(np.exp(zb - m).sum(axis=1, keepdims=True)))
        return out

    def describe(self) -> dict:
        return {"encoder": self.cfg.to_dict(), "n_params": self.store.size,
                "groups": {g: len(self.store.names(g)) for g in GROUPS}}

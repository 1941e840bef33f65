"""Decoder-only translator conditioned on a projected scene prefix.

Input layout per example::

    [IMG x L] [source tokens] [SEP] [target tokens] [EOS]

The L visual slots carry ``P(E(x0))`` instead of token embeddings; without a
scene the IMG block is omitted. Loss is token-level NLL over the target side
only (target words and EOS).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, glorot, linear
from .world import SCENE_DIM, SOURCE_WORDS, TARGET_WORDS, TranslationExample

SPECIALS = ("<bos>", "<eos>", "<pad>", "<sep>", "<img>")
BOS, EOS, PAD, SEP, IMG = range(5)


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = SPECIALS + SOURCE_WORDS + TARGET_WORDS):
        if tuple(tokens[:5]) != SPECIALS:
            raise ValueError("special tokens must occupy ids 0-4")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass(frozen=True)
class TranslatorConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 2
    max_len: int = 48
    n_visual: int = 4
    enc_hidden: int = 64


class VisualProjector(Module):
    """Scene encoder (2-layer tanh, 27 -> hidden) followed by a linear projector
    to ``n_visual`` embeddings of width ``d_model``.

    ``frozen_encoder`` swaps the encoder for a fixed random linear map that is
    not a parameter (the "no vision encoder" ablation).
    """

    def __init__(self, rng: np.random.Generator, cfg: TranslatorConfig = TranslatorConfig(),
                 frozen_encoder: bool = False):
        super().__init__()
        self.cfg = cfg
        self.frozen_encoder = frozen_encoder
        h = cfg.enc_hidden
        if frozen_encoder:
            self.fixed_map = rng.normal(0.0, 1.0 / np.sqrt(SCENE_DIM), (SCENE_DIM, h))
        else:
            self.e1 = self.param("enc.w1", glorot(rng, SCENE_DIM, h))
            self.e1b = self.param("enc.b1", np.zeros(h))
            self.e2 = self.param("enc.w2", glorot(rng, h, h))
            self.e2b = self.param("enc.b2", np.zeros(h))
        self.p = self.param("proj.w", glorot(rng, h, cfg.n_visual * cfg.d_model))
        self.pb = self.param("proj.b", rng.normal(0.0, 0.02, cfg.n_visual * cfg.d_model))

    def encode(self, x0) -> Tensor:
        x = Tensor(np.asarray(x0, dtype=np.float64).reshape(-1, SCENE_DIM))
        if self.frozen_encoder:
            return ad.matmul(x, Tensor(self.fixed_map))
        h = ad.tanh(linear(x, self.e1, self.e1b))
        return ad.tanh(linear(h, self.e2, self.e2b))

    def __call__(self, x0) -> Tensor:
        z = linear(self.encode(x0), self.p, self.pb)
        return ad.reshape(z, (z.shape[0], self.cfg.n_visual, self.cfg.d_model))


def project_visual(x0, proj: VisualProjector) -> Tensor:
    return proj(x0)


class DecoderModel(Module):
    def __init__(self, rng: np.random.Generator, vocab_size: int, cfg: TranslatorConfig = TranslatorConfig()):
        super().__init__()
        self.cfg = cfg
        d, f = cfg.d_model, cfg.d_ff
        self.tok = self.param("tok", rng.normal(0.0, 0.1, (vocab_size, d)))
        self.pos = self.param("pos", rng.normal(0.0, 0.02, (cfg.max_len, d)))
        self.blocks = []
        for i in range(cfg.n_layers):
            p = f"block{i}."
            self.blocks.append({
                "ln1g": self.param(p + "ln1.g", np.ones(d)),
                "ln1b": self.param(p + "ln1.b", np.zeros(d)),
                "qkv": self.param(p + "attn.qkv", glorot(rng, d, 3 * d)),
                "qkvb": self.param(p + "attn.qkv_b", np.zeros(3 * d)),
                "o": self.param(p + "attn.o", glorot(rng, d, d) / np.sqrt(2 * cfg.n_layers)),
                "ob": self.param(p + "attn.o_b", np.zeros(d)),
                "ln2g": self.param(p + "ln2.g", np.ones(d)),
                "ln2b": self.param(p + "ln2.b", np.zeros(d)),
                "f1": self.param(p + "ff.w1", glorot(rng, d, f)),
                "f1b": self.param(p + "ff.b1", np.zeros(f)),
                "f2": self.param(p + "ff.w2", glorot(rng, f, d) / np.sqrt(2 * cfg.n_layers)),
                "f2b": self.param(p + "ff.b2", np.zeros(d)),
            })
        self.lnfg = self.param("lnf.g", np.ones(d))
        self.lnfb = self.param("lnf.b", np.zeros(d))

    def _attention(self, x: Tensor, blk: dict, mask: np.ndarray) -> Tensor:
        B, T, d = x.shape
        H = self.cfg.n_heads
        dh = d // H
        qkv = ad.reshape(linear(x, blk["qkv"], blk["qkvb"]), (B, T, 3, H, dh))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ad.matmul(ad.softmax(scores, mask=mask), v)  # (B, H, T, dh)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, d))
        return linear(att, blk["o"], blk["ob"])

    def __call__(self, ids: np.ndarray, visuals: Tensor | None = None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        B, T = ids.shape
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        x = ad.gather_rows(self.tok, ids)
        if visuals is not None:
            L = visuals.shape[1]
            x = ad.concat([visuals, x[:, L:, :]], axis=1)
        x = ad.add(x, self.pos[:T])
        mask = np.triu(np.full((T, T), -np.inf), k=1)
        for blk in self.blocks:
            x = ad.add(x, self._attention(ad.layer_norm(x, blk["ln1g"], blk["ln1b"]), blk, mask))
            h = ad.relu(linear(ad.layer_norm(x, blk["ln2g"], blk["ln2b"]), blk["f1"], blk["f1b"]))
            x = ad.add(x, linear(h, blk["f2"], blk["f2b"]))
        x = ad.layer_norm(x, self.lnfg, self.lnfb)
        return ad.matmul(x, ad.transpose(self.tok, (1, 0)))


class Translator:
    """Decoder plus projector; ``use_visual`` decides whether the IMG prefix exists."""

    def __init__(self, rng: np.random.Generator, vocab: Vocabulary | None = None,
                 cfg: TranslatorConfig = TranslatorConfig(), use_visual: bool = True,
                 frozen_encoder: bool = False):
        self.vocab = vocab or Vocabulary()
        self.cfg = cfg
        self.use_visual = use_visual
        self.model = DecoderModel(rng, len(self.vocab), cfg)
        self.proj = VisualProjector(rng, cfg, frozen_encoder=frozen_encoder)

    def parameters(self) -> list[Tensor]:
        ps = self.model.parameters()
        return ps + self.proj.parameters() if self.use_visual else ps

    def prefix(self, source: Sequence[str]) -> list[int]:
        img = [IMG] * self.cfg.n_visual if self.use_visual else []
        return img + self.vocab.encode(source) + [SEP]


def _pad(rows: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def lm_logits(ids, visuals: Tensor | None, model: DecoderModel) -> Tensor:
    return model(ids, visuals)


def canonical_order(examples: Sequence[TranslationExample]) -> list[int]:
    """Fixed reduction order for a batch, independent of how it was shuffled."""
    return sorted(range(len(examples)),
                  key=lambda i: (examples[i].source, examples[i].target, examples[i].split))


def build_batch(tr: Translator, examples: Sequence[TranslationExample]):
    """(ids, next-token targets, loss weights) for teacher forcing."""
    seqs, starts = [], []
    for ex in examples:
        pre = tr.prefix(ex.source)
        starts.append(len(pre) - 1)  # position of SEP predicts the first target token
        seqs.append(pre + tr.vocab.encode(ex.target) + [EOS])
    ids = _pad(seqs)
    targets = np.full_like(ids, PAD)
    targets[:, :-1] = ids[:, 1:]
    weights = np.zeros(ids.shape)
    for i, (s, seq) in enumerate(zip(starts, seqs)):
        weights[i, s : len(seq) - 1] = 1.0
    return ids, targets, weights


def mllm_loss(examples: Sequence[TranslationExample], scenes, tr: Translator) -> Tensor:
    """Mean target-side NLL; ``scenes`` is (B, 27) or None when ``tr.use_visual`` is off."""
    if not examples:
        raise ValueError("mllm_loss needs a non-empty batch")
    order = canonical_order(examples)
    examples = [examples[i] for i in order]
    visuals = None
    if tr.use_visual:
        if scenes is None:
            raise ValueError("translator expects scenes for its visual prefix")
        visuals = tr.proj(np.asarray(scenes)[order])
    ids, targets, weights = build_batch(tr, examples)
    logits = tr.model(ids, visuals)
    B, T, V = logits.shape
    return ad.softmax_cross_entropy(ad.reshape(logits, (B * T, V)), targets.reshape(-1), weights.reshape(-1))


def greedy_decode(sources: Sequence[Sequence[str]], scenes, tr: Translator, max_len: int = 16) -> list[list[str]]:
    """Argmax decoding after SEP until EOS or ``max_len`` target tokens."""
    seqs = [tr.prefix(s) for s in sources]
    visuals = tr.proj(np.asarray(scenes)) if tr.use_visual else None
    out: list[list[int]] = [[] for _ in sources]
    live = list(range(len(sources)))
    for _ in range(max_len):
        if not live:
            break
        room = tr.cfg.max_len - max(len(seqs[i]) for i in live)
        if room <= 0:
            break
        ids = _pad([seqs[i] for i in live])
        vis = None if visuals is None else Tensor(visuals.data[live])
        logits = tr.model(ids, vis).data
        still = []
        for row, i in enumerate(live):
            nxt = int(np.argmax(logits[row, len(seqs[i]) - 1]))
            if nxt == EOS:
                continue
            out[i].append(nxt)
            seqs[i].append(nxt)
            still.append(i)
        live = still
    return [tr.vocab.decode(o) for o in out]


def sequence_nll(source: Sequence[str], target: Sequence[str], scene, tr: Translator) -> float:
    """-log p(target, EOS | source, scene) summed over target positions."""
    ex = TranslationExample(list(source), list(target), None, "normal")  # type: ignore[arg-type]
    ids, targets, weights = build_batch(tr, [ex])
    vis = tr.proj(np.asarray(scene)[None]) if tr.use_visual else None
    logits = tr.model(ids, vis).data[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    sel = weights[0] > 0
    return float(-logp[sel, targets[0, sel]].sum())

"""Metrics and experiment drivers: BLEU, the scene/text cosine score, the
reward-vs-BLEU curve and the four-row ablation table."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .config import RunConfig, diff
from .diffusion import sample_trajectories
from .reward import SymbolLexicon, get_lexicon, reward, strict_lexicon, symbol_bag
from .rng import stream
from .trainer import (
    MissingArtifactError,
    artifact,
    finetune_ddpo,
    generate_data,
    load_split,
    load_translator,
    pretrain_diffusion,
    schedule_for,
    train_translator,
    translator_checkpoints,
)
from .translator import Translator, greedy_decode
from .world import Scene, TranslationExample, decode_scene, encode_scene, extract_vsg, parse_lsg

log = logging.getLogger(__name__)

SPLITS = ("normal", "ambiguous")
MIN_CURVE_POINTS = 5


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_n: int = 4) -> tuple[list[int], list[int], int, int]:
    """Clipped matches and totals per order, plus hypothesis and reference lengths."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not references:
        raise ValueError("corpus_bleu needs at least one reference")
    match, total = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    return match, total, hyp_len, ref_len


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU-4 in [0, 100]; 0 when any n-gram precision is 0."""
    match, total, c, r = bleu_stats(hypotheses, references)
    if c == 0 or any(m == 0 for m in match):
        return 0.0
    log_p = math.fsum(math.log(m / t) for m, t in zip(match, total)) / len(match)
    bp = math.exp(min(0.0, 1.0 - r / c))
    return 100.0 * bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# text/scene consistency


def clip_score_analog(source: Sequence[str], scene: Scene, lex: SymbolLexicon | None = None) -> float:
    """max(cos(c, v), 0) for the symbol bags of the sentence graph and the scene graph.

    With a non-strict lexicon the cosine is taken under the lexicon's
    similarity matrix, so related symbols count as partially shared.
    """
    lex = lex or strict_lexicon()
    c, v = symbol_bag(parse_lsg(source)), symbol_bag(extract_vsg(scene))
    syms = sorted(set(c) | set(v))
    cv = np.array([c.get(s, 0) for s in syms], dtype=float)
    vv = np.array([v.get(s, 0) for s in syms], dtype=float)
    S = np.array([[lex.sim(a, b) for b in syms] for a in syms])
    den = math.sqrt(cv @ S @ cv) * math.sqrt(vv @ S @ vv)
    if den == 0:
        return 0.0
    return float(min(max((cv @ S @ vv) / den, 0.0), 1.0))


# ---------------------------------------------------------------------------
# evaluation


def token_hits(hyp: Sequence[str], ref: Sequence[str]) -> int:
    """Positions where the hypothesis reproduces the reference token."""
    return sum(1 for a, b in zip(hyp, ref) if a == b)


@dataclass
class SplitScores:
    bleu: float
    token_accuracy: float
    mean_reward: float
    clip_analog: float
    n_examples: int
    n_tokens: int


@dataclass
class EvalReport:
    bleu: float
    token_accuracy: float
    mean_reward: float
    clip_analog: float
    splits: dict[str, SplitScores] = field(default_factory=dict)

    FIELDS = ("bleu", "token_accuracy", "mean_reward", "clip_analog")

    def flat(self) -> dict[str, float]:
        out = {k: getattr(self, k) for k in self.FIELDS}
        for name in SPLITS:
            s = self.splits.get(name)
            for k in self.FIELDS + ("n_examples",):
                out[f"{k}_{name}"] = getattr(s, k) if s else float("nan")
        return out


def report_columns() -> list[str]:
    cols = list(EvalReport.FIELDS)
    for name in SPLITS:
        cols += [f"{k}_{name}" for k in EvalReport.FIELDS + ("n_examples",)]
    return cols


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if v != v else f"{v:.6f}"


def eval_scenes(cfg: RunConfig, examples: Sequence[TranslationExample], den, rng: np.random.Generator):
    """Scenes shown to the translator at test time, plus each one's decoded Scene (or None)."""
    kind = cfg.scene_source
    if kind == "none":
        return None, [None] * len(examples)
    if kind == "oracle":
        x0 = np.stack([encode_scene(ex.scene) for ex in examples])
    else:
        trajs = sample_trajectories([ex.source for ex in examples], den, schedule_for(cfg), rng,
                                    cfg.ddpo.noise_scale)
        x0 = np.stack([t.x0 for t in trajs])
    return x0, [decode_scene(v) for v in x0]


def evaluate(cfg: RunConfig, tr: Translator, den, examples: Sequence[TranslationExample],
             rng: np.random.Generator | None = None) -> EvalReport:
    """Decode every example and score it; a run without scenes scores 0 on the scene metrics."""
    rng = rng or stream(cfg.data.seed, "eval", 0)
    lex = get_lexicon(cfg.data.lexicon)
    x0, scenes = eval_scenes(cfg, examples, den, rng)
    hyps = greedy_decode([ex.source for ex in examples], x0, tr, cfg.translator.max_decode)
    rewards, clips = [], []
    for ex, sc in zip(examples, scenes):
        if sc is None:
            rewards.append(0.0)
            clips.append(0.0)
        else:
            rewards.append(reward(parse_lsg(ex.source), extract_vsg(sc), lex))
            clips.append(clip_score_analog(ex.source, sc, lex))

    def scores(idx: list[int]) -> SplitScores:
        refs = [examples[i].target for i in idx]
        n_tok = sum(len(r) for r in refs)
        hits = sum(token_hits(hyps[i], examples[i].target) for i in idx)
        return SplitScores(
            bleu=corpus_bleu([hyps[i] for i in idx], refs),
            token_accuracy=hits / n_tok,
            mean_reward=math.fsum(rewards[i] for i in idx) / len(idx),
            clip_analog=math.fsum(clips[i] for i in idx) / len(idx),
            n_examples=len(idx),
            n_tokens=n_tok,
        )

    every = scores(list(range(len(examples))))
    splits = {}
    for name in SPLITS:
        idx = [i for i, ex in enumerate(examples) if ex.split == name]
        if idx:
            splits[name] = scores(idx)
    return EvalReport(every.bleu, every.token_accuracy, every.mean_reward, every.clip_analog, splits)


def write_report(path: Path, report: EvalReport) -> None:
    flat = report.flat()
    cols = report_columns()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(",".join(cols) + "\n" + ",".join(_fmt(flat[c]) for c in cols) + "\n")


def evaluate_run(cfg: RunConfig, run_dir: Path, upstream: Path | None = None) -> EvalReport:
    tr, den = load_translator(cfg, artifact(run_dir, "translator/model.bin"))
    report = evaluate(cfg, tr, den, load_split(upstream or run_dir, "test"))
    write_report(Path(run_dir) / "report.csv", report)
    return report


# ---------------------------------------------------------------------------
# reward vs BLEU curve


@dataclass(frozen=True)
class CurvePoint:
    iteration: int
    bleu: float
    mean_reward: float


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Rank correlation, or None with fewer than 5 points or a constant column."""
    if len(xs) < MIN_CURVE_POINTS or np.ptp(xs) == 0 or np.ptp(ys) == 0:
        return None
    return float(spearmanr(xs, ys).statistic)


def log_curve(cfg: RunConfig, checkpoints: Sequence[tuple[int, Path]],
              dev: Sequence[TranslationExample]) -> tuple[list[CurvePoint], float | None]:
    """BLEU and mean scene reward on a fixed dev set for each checkpoint.

    Every checkpoint sees the same starting noise, so differences between
    points come from the parameters only.
    """
    its = [it for it, _ in checkpoints]
    if any(b <= a for a, b in zip(its, its[1:])):
        raise ValueError("checkpoint iterations must be strictly increasing")
    points = []
    for it, path in checkpoints:
        tr, den = load_translator(cfg, path)
        rep = evaluate(cfg, tr, den, dev, stream(cfg.data.seed, "eval", 1))
        points.append(CurvePoint(it, rep.bleu, rep.mean_reward))
        log.info("curve point %d  bleu %.2f  reward %.4f", it, rep.bleu, rep.mean_reward)
    rho = spearman([p.bleu for p in points], [p.mean_reward for p in points])
    return points, rho


def curve_csv(points: Sequence[CurvePoint]) -> str:
    rows = ["iteration,bleu,mean_reward"]
    rows += [f"{p.iteration},{_fmt(p.bleu)},{_fmt(p.mean_reward)}" for p in points]
    return "\n".join(rows) + "\n"


def write_curve(run_dir: Path, points, rho) -> None:
    Path(run_dir, "curve.csv").write_text(curve_csv(points))
    text = "spearman=undefined\n" if rho is None else f"spearman={rho:.6f}\n"
    Path(run_dir, "curve_summary.txt").write_text(f"points={len(points)}\n" + text)


def run_curve(cfg: RunConfig, run_dir: Path, upstream: Path | None = None):
    ckpts = translator_checkpoints(run_dir)
    if not ckpts:
        raise MissingArtifactError(f"missing checkpoint: no translator checkpoints under {run_dir}/translator/ckpt")
    points, rho = log_curve(cfg, ckpts, load_split(upstream or run_dir, "dev"))
    write_curve(run_dir, points, rho)
    return points, rho


# ---------------------------------------------------------------------------
# ablation


ROWS = {
    "full": {},
    "wo_sd": {"ablation.use_diffusion": False},
    "w_ri": {"ablation.use_real_scenes": True},
    "wo_vs": {"ablation.use_scene_encoder": False},
}


def row_configs(base: RunConfig) -> dict[str, RunConfig]:
    """One config per row; each differs from the full row in its declared switch only."""
    full = base.replace(ablation__use_diffusion=True, ablation__use_real_scenes=False,
                        ablation__use_scene_encoder=True)
    out = {}
    for name, switches in ROWS.items():
        cfg = full.replace(**{k.replace(".", "__"): v for k, v in switches.items()})
        changed = diff(full, cfg)
        if changed != set(switches):
            raise AssertionError(f"row {name} changes {sorted(changed)}, declared {sorted(switches)}")
        out[name] = cfg
    return out


def row_dir(run_dir: Path, name: str, cfg: RunConfig) -> Path:
    return Path(run_dir) / "rows" / f"{name}-{cfg.hash()}"


ABLATION_COLUMNS = ["row", "status"] + report_columns()


def ablation_csv(results: dict[str, EvalReport | None]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for name in ROWS:
        rep = results.get(name)
        if rep is None:
            w.writerow([name, "absent"] + [""] * (len(ABLATION_COLUMNS) - 2))
        else:
            flat = rep.flat()
            w.writerow([name, "ok"] + [_fmt(flat[c]) for c in report_columns()])
    return buf.getvalue()


def read_ablation(path: Path) -> dict[str, dict[str, float]]:
    with open(path) as fh:
        return {r["row"]: {k: float(v) for k, v in r.items() if k not in ("row", "status") and v != ""}
                for r in csv.DictReader(fh) if r["status"] == "ok"}


def run_ablation(base: RunConfig, run_dir: Path, train: bool = True) -> dict[str, EvalReport | None]:
    """Train (optionally) and evaluate the four rows on one shared test set.

    Stages 1-2 and the data are built once in ``run_dir``; each row trains its
    translator in its own hash-keyed subdirectory. A row whose artifacts are
    missing is reported absent and the others still run. The full row's
    reward-vs-BLEU curve is written next to the table.
    """
    run_dir = Path(run_dir)
    cfgs = row_configs(base)
    if train:
        generate_data(cfgs["full"], run_dir)
        pretrain_diffusion(cfgs["full"], run_dir)
        finetune_ddpo(cfgs["full"], run_dir)
    test = load_split(run_dir, "test")
    results: dict[str, EvalReport | None] = {}
    for name, cfg in cfgs.items():
        rdir = row_dir(run_dir, name, cfg)
        try:
            if train:
                train_translator(cfg, rdir, upstream=run_dir)
            tr, den = load_translator(cfg, artifact(rdir, "translator/model.bin"))
        except MissingArtifactError as e:
            log.warning("row %s absent: %s", name, e)
            results[name] = None
            continue
        results[name] = evaluate(cfg, tr, den, test)
        write_report(rdir / "report.csv", results[name])
        if name == "full":
            run_curve(cfg, rdir, upstream=run_dir)
            for f in ("curve.csv", "curve_summary.txt"):
                (run_dir / f).write_bytes((rdir / f).read_bytes())
    (run_dir / "ablation.csv").write_text(ablation_csv(results))
    return results

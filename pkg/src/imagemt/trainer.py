"""Ordered training: DDPM pretraining, DDPO fine-tuning, then the translator.

All artifacts of a run live under one directory::

    data/{diffusion,diffusion_val,train,dev,test}.jsonl
    diffusion/denoiser.bin   diffusion/loss_curve.csv
    ddpo/denoiser.bin        ddpo/ddpo_log.csv
    translator/model.bin     translator/train_log.csv   translator/ckpt/step_*.bin
    manifest.txt

Stage 3 reads stage-1/2 artifacts from ``upstream`` (the run directory by
default), which lets ablation rows share one tuned denoiser.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import RunConfig
from .ddpo import BaselineState, advantages, collect_rollouts, ddpo_step, policy_objective, scene_graph_reward_fn
from .diffusion import Context, Denoiser, NoiseSchedule, build_schedule, ddpm_loss, trajectory_log_probs
from .nn import Adam, clip_by_global_norm, load_modules, save_modules
from .reward import get_lexicon
from .rng import stream
from .translator import Translator, TranslatorConfig, mllm_loss
from .world import SCENE_DIM, TranslationExample, encode_scene, load_dataset, make_examples

log = logging.getLogger(__name__)

DATASETS = ("diffusion", "diffusion_val", "train", "dev", "test")


class MissingArtifactError(FileNotFoundError):
    pass


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# paths, manifest


def artifact(run_dir: Path, rel: str) -> Path:
    p = Path(run_dir) / rel
    if not p.exists():
        raise MissingArtifactError(f"missing checkpoint or artifact: {p}")
    return p


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(run_dir: Path) -> dict[str, str]:
    p = Path(run_dir) / "manifest.txt"
    if not p.exists():
        return {}
    return dict(line.split("=", 1) for line in p.read_text().splitlines() if "=" in line)


def update_manifest(run_dir: Path, **entries) -> None:
    m = read_manifest(run_dir)
    for k, v in entries.items():
        m[k.replace("__", ".")] = str(v)
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / "manifest.txt").write_text("".join(f"{k}={m[k]}\n" for k in sorted(m)))


def _checksum(run_dir: Path, rel: str) -> dict:
    return {f"checksum.{rel}": sha256(Path(run_dir) / rel)}


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# data


def generate_data(cfg: RunConfig, run_dir: Path) -> dict[str, Path]:
    d = cfg.data
    sizes = {
        "diffusion": (d.n_diffusion, 0.0),
        "diffusion_val": (cfg.diffusion.n_val, 0.0),
        "train": (d.n_train, d.ambiguous_fraction),
        "dev": (d.n_dev, d.ambiguous_fraction),
        "test": (d.n_test, d.ambiguous_fraction),
    }
    out = {}
    for i, name in enumerate(DATASETS):
        n, frac = sizes[name]
        exs = make_examples(stream(d.seed, "data", i), n, frac)
        path = Path(run_dir) / "data" / f"{name}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(ex.to_json() + "\n" for ex in exs), encoding="utf-8")
        out[name] = path
    update_manifest(run_dir, config_hash=cfg.hash(), seed=d.seed,
                    **{k: v for name in DATASETS for k, v in _checksum(run_dir, f"data/{name}.jsonl").items()})
    return out


def load_split(run_dir: Path, name: str) -> list[TranslationExample]:
    return load_dataset(artifact(run_dir, f"data/{name}.jsonl"))


# ---------------------------------------------------------------------------
# model builders


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    f = cfg.diffusion
    return build_schedule(f.T, f.beta_start, f.beta_end)


def new_denoiser(cfg: RunConfig) -> Denoiser:
    f = cfg.diffusion
    return Denoiser(stream(cfg.data.seed, "diffusion", 1), f.hidden, f.ctx_dim, f.time_dim, f.skip)


def load_denoiser(cfg: RunConfig, path: Path) -> Denoiser:
    den = new_denoiser(cfg)
    load_modules(path, denoiser=den)
    return den


def new_translator(cfg: RunConfig) -> Translator:
    t = cfg.translator
    tcfg = TranslatorConfig(d_model=t.d_model, n_heads=t.n_heads, d_ff=t.d_ff, n_layers=t.n_layers,
                            n_visual=t.n_visual)
    return Translator(stream(cfg.data.seed, "translator", 0), cfg=tcfg,
                      use_visual=cfg.scene_source != "none",
                      frozen_encoder=not cfg.ablation.use_scene_encoder)


def load_translator(cfg: RunConfig, path: Path) -> tuple[Translator, Denoiser | None]:
    """Translator plus the denoiser bundled with it (generated-scene runs only)."""
    tr = new_translator(cfg)
    mods = {"model": tr.model, "proj": tr.proj}
    den = None
    if cfg.scene_source == "generated":
        den = new_denoiser(cfg)
        mods["denoiser"] = den
    load_modules(path, **mods)
    return tr, den


def _fixed_noise(rng: np.random.Generator, n: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    return rng.integers(1, T + 1, size=n), rng.standard_normal((n, SCENE_DIM))


def holdout_loss(x0, ctx: Context, den: Denoiser, sched: NoiseSchedule, t, eps) -> float:
    return float(ddpm_loss(x0, ctx, den, sched, t=t, eps=eps).data)


# ---------------------------------------------------------------------------
# stage 1


def pretrain_diffusion(cfg: RunConfig, run_dir: Path) -> Path:
    """Fit the DDPM until validation loss improves < min_improvement over ``patience`` epochs."""
    f = cfg.diffusion
    train = load_split(run_dir, "diffusion")
    val = load_split(run_dir, "diffusion_val")
    sched = schedule_for(cfg)
    den = new_denoiser(cfg)
    opt = Adam(den.parameters(), f.lr)
    rng = stream(cfg.data.seed, "diffusion", 0)

    x0 = np.stack([encode_scene(ex.scene) for ex in train])
    ctx = Context.from_tokens([ex.source for ex in train])
    vx0 = np.stack([encode_scene(ex.scene) for ex in val])
    vctx = Context.from_tokens([ex.source for ex in val])
    vt, veps = _fixed_noise(stream(cfg.data.seed, "diffusion", 2), len(val), sched.T)

    ckpt = Path(run_dir) / "diffusion" / "denoiser.bin"
    save_modules(ckpt, denoiser=den)
    history = [holdout_loss(vx0, vctx, den, sched, vt, veps)]
    rows = [[0, "", repr(history[0])]]
    n = len(train)
    for epoch in range(1, f.max_epochs + 1):
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n, f.batch_size):
            idx = np.sort(perm[s : s + f.batch_size])
            with Tape() as tape:
                loss = ddpm_loss(x0[idx], ctx.take(idx), den, sched, rng)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"DDPM loss is {loss.data} at epoch {epoch}; kept {ckpt}")
            opt.step(tape.gradient(loss, den.parameters()))
            losses.append(float(loss.data))
        v = holdout_loss(vx0, vctx, den, sched, vt, veps)
        if not np.isfinite(v):
            raise DivergenceError(f"validation loss is {v} at epoch {epoch}; kept {ckpt}")
        save_modules(ckpt, denoiser=den)
        history.append(v)
        rows.append([epoch, repr(math.fsum(losses) / len(losses)), repr(v)])
        log.info("diffusion epoch %d  val %.4f", epoch, v)
        p = f.patience
        if epoch >= p and history[-1 - p] - v < f.min_improvement * history[-1 - p]:
            break
    _write_csv(Path(run_dir) / "diffusion" / "loss_curve.csv", ["epoch", "train_loss", "val_loss"], rows)
    update_manifest(run_dir, diffusion__epochs=len(history) - 1, diffusion__initial_val=repr(history[0]),
                    diffusion__final_val=repr(history[-1]), **_checksum(run_dir, "diffusion/denoiser.bin"))
    return ckpt


# ---------------------------------------------------------------------------
# stage 2


DDPO_COLUMNS = ["step", "mean_reward", "std_reward", "grad_norm", "decodable_fraction", "ddpm_holdout_loss"]


def finetune_ddpo(cfg: RunConfig, run_dir: Path) -> Path:
    """REINFORCE steps on training-set sources; one fresh rollout batch per step."""
    p = cfg.ddpo
    src = artifact(run_dir, "diffusion/denoiser.bin")
    out = Path(run_dir) / "ddpo" / "denoiser.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    rows: list[list] = []
    if p.rl_steps == 0:
        shutil.copyfile(src, out)
        shutil.copyfile(str(src) + ".manifest", str(out) + ".manifest")
    else:
        sched = schedule_for(cfg)
        den = load_denoiser(cfg, src)
        sources = [ex.source for ex in load_split(run_dir, "train")]
        hold = load_split(run_dir, "diffusion_val")[: p.n_holdout]
        hx0 = np.stack([encode_scene(ex.scene) for ex in hold])
        hctx = Context.from_tokens([ex.source for ex in hold])
        ht, heps = _fixed_noise(stream(cfg.data.seed, "ddpo", 1), len(hold), sched.T)
        opt = Adam(den.parameters(), p.lr)
        baseline = BaselineState(p.baseline_decay)
        reward_fn = scene_graph_reward_fn(get_lexicon(cfg.data.lexicon))
        rng = stream(cfg.data.seed, "ddpo", 0)
        k = min(p.contexts_per_step, len(sources))
        before = holdout_loss(hx0, hctx, den, sched, ht, heps)
        for step in range(1, p.rl_steps + 1):
            pick = np.sort(rng.choice(len(sources), size=k, replace=False))
            batch = collect_rollouts([sources[i] for i in pick], den, sched, reward_fn, rng,
                                     p.samples_per_context, p.noise_scale)
            info = ddpo_step(batch, den, sched, opt, baseline, p.clip_norm)
            h = holdout_loss(hx0, hctx, den, sched, ht, heps)
            rows.append([step, repr(info["mean_reward"]), repr(info["std_reward"]), repr(info["grad_norm"]),
                         repr(info["decodable_fraction"]), repr(h)])
            if step % 20 == 0:
                log.info("ddpo step %d  reward %.3f  holdout %.4f", step, info["mean_reward"], h)
        save_modules(out, denoiser=den)
        update_manifest(run_dir, ddpo__holdout_before=repr(before))
    _write_csv(Path(run_dir) / "ddpo" / "ddpo_log.csv", DDPO_COLUMNS, rows)
    update_manifest(run_dir, **_checksum(run_dir, "ddpo/denoiser.bin"))
    return out


def read_ddpo_log(run_dir: Path) -> list[dict[str, float]]:
    with open(artifact(run_dir, "ddpo/ddpo_log.csv")) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# stage 3


@dataclass
class JointLossState:
    """Constants that normalize the two loss terms; captured once, then frozen."""

    mllm_constant: float | None = None
    imagerl_constant: float | None = None

    @property
    def captured(self) -> bool:
        return self.mllm_constant is not None

    def capture(self, mllm_values, imagerl_values) -> None:
        if self.captured:
            raise RuntimeError("joint-loss constants are already frozen")
        c1 = math.fsum(mllm_values) / len(mllm_values)
        c2 = math.fsum(imagerl_values) / len(imagerl_values)
        if not (c1 > 0 and c2 > 0):
            raise ValueError(f"joint-loss constants must be positive, got {c1}, {c2}")
        self.mllm_constant, self.imagerl_constant = c1, c2

    def combine(self, l_mllm: Tensor, l_imagerl: Tensor) -> Tensor:
        if not self.captured:
            raise RuntimeError("joint-loss constants not captured yet")
        return ad.add(ad.divide(l_mllm, self.mllm_constant), ad.divide(l_imagerl, self.imagerl_constant))


def imagerl_loss(log_probs: Tensor | None, adv: np.ndarray, mean_reward: float) -> Tensor:
    """Value ``1 - mean reward``; gradient is the negated REINFORCE surrogate gradient.

    The reward itself is not differentiable, so the surrogate's value is
    swapped for the expected-reward shortfall while its gradient is kept.
    """
    value = 1.0 - mean_reward
    if log_probs is None or not np.any(adv):
        return Tensor(np.float64(value))
    sur = policy_objective(log_probs, adv)
    return ad.add(ad.scale(sur, -1.0), Tensor(np.float64(value + float(sur.data))))


class SceneSource:
    """Supplies per-batch scenes for the translator according to the ablation switches."""

    def __init__(self, cfg: RunConfig, den: Denoiser | None, sched: NoiseSchedule | None,
                 rng: np.random.Generator):
        self.kind = cfg.scene_source
        self.den, self.sched, self.rng = den, sched, rng
        self.noise_scale = cfg.ddpo.noise_scale
        self.reward_fn = scene_graph_reward_fn(get_lexicon(cfg.data.lexicon))

    def __call__(self, batch: list[TranslationExample]):
        """(scenes or None, rollout batch or None)."""
        if self.kind == "none":
            return None, None
        if self.kind == "oracle":
            return np.stack([encode_scene(ex.scene) for ex in batch]), None
        rb = collect_rollouts([ex.source for ex in batch], self.den, self.sched, self.reward_fn,
                              self.rng, 1, self.noise_scale)
        return np.stack([r.trajectory.x0 for r in rb.rollouts]), rb


def curve_steps(total: int, points: int) -> list[int]:
    """Step 0 plus ``points`` evenly spaced steps ending at ``total``."""
    return sorted({0} | {round(k * total / points) for k in range(1, points + 1)})


TRAIN_COLUMNS = ["step", "epoch", "mllm_loss", "imagerl_loss", "loss", "mean_reward"]


def train_translator(cfg: RunConfig, run_dir: Path, upstream: Path | None = None) -> Path:
    t = cfg.translator
    upstream = Path(upstream or run_dir)
    kind = cfg.scene_source
    sched = den = None
    if kind == "generated":
        sched = schedule_for(cfg)
        den = load_denoiser(cfg, artifact(upstream, "ddpo/denoiser.bin"))
    train = load_split(upstream, "train")

    tr = new_translator(cfg)
    opt = Adam(tr.parameters(), t.lr)
    rng = stream(cfg.data.seed, "translator", 1)
    source = SceneSource(cfg, den, sched, stream(cfg.data.seed, "translator", 2))
    joint = kind == "generated" and t.joint_loss
    den_params = den.parameters() if joint and t.update_denoiser else []
    den_opt = Adam(den_params, t.denoiser_lr) if den_params else None
    baseline = BaselineState(cfg.ddpo.baseline_decay)
    state = JointLossState()

    n = len(train)
    nb = math.ceil(n / t.batch_size)
    total = nb * t.epochs
    marks = set(curve_steps(total, t.curve_points))
    out_dir = Path(run_dir) / "translator"
    ckpt_dir = out_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for old in ckpt_dir.glob("step_*.bin*"):
        old.unlink()

    def save(path):
        mods = {"model": tr.model, "proj": tr.proj}
        if den is not None:
            mods["denoiser"] = den
        save_modules(path, **mods)

    def rl_term(rb, with_grad: bool) -> Tensor | None:
        adv = advantages(rb, baseline)
        lp = trajectory_log_probs([r.trajectory for r in rb.rollouts], den, sched) if with_grad and np.any(adv) else None
        return imagerl_loss(lp, adv, rb.mean)

    perm = rng.permutation(n)
    if joint:
        m_vals, r_vals = [], []
        for b in range(min(t.capture_batches, nb)):
            batch = [train[i] for i in perm[b * t.batch_size : (b + 1) * t.batch_size]]
            scenes, rb = source(batch)
            m_vals.append(float(mllm_loss(batch, scenes, tr).data))
            r_vals.append(float(rl_term(rb, False).data))
            baseline.update(rb)
        state.capture(m_vals, r_vals)

    rows = []
    step = 0
    if 0 in marks:
        save(ckpt_dir / "step_000000.bin")
    params = tr.parameters() + den_params
    for epoch in range(1, t.epochs + 1):
        if epoch > 1:
            perm = rng.permutation(n)
        for b in range(nb):
            batch = [train[i] for i in perm[b * t.batch_size : (b + 1) * t.batch_size]]
            scenes, rb = source(batch)
            with Tape() as tape:
                l_m = mllm_loss(batch, scenes, tr)
                l_r = rl_term(rb, bool(den_params)) if joint else None
                loss = state.combine(l_m, l_r) if joint else l_m
            if not np.isfinite(loss.data):
                raise DivergenceError(f"translator loss is {loss.data} at step {step + 1}")
            grads = tape.gradient(loss, params)
            opt.step(grads[: len(tr.parameters())])
            if den_opt is not None:
                g, norm = clip_by_global_norm(grads[len(tr.parameters()):], cfg.ddpo.clip_norm)
                if norm > 0 and np.isfinite(norm):
                    den_opt.step(g)
            if rb is not None:
                baseline.update(rb)
            step += 1
            rows.append([step, epoch, repr(float(l_m.data)), "" if l_r is None else repr(float(l_r.data)),
                         repr(float(loss.data)), "" if rb is None else repr(rb.mean)])
            if step in marks:
                save(ckpt_dir / f"step_{step:06d}.bin")
        log.info("translator epoch %d  loss %.4f", epoch, float(rows[-1][4]))

    model = out_dir / "model.bin"
    save(model)
    _write_csv(out_dir / "train_log.csv", TRAIN_COLUMNS, rows)
    consts = {}
    if joint:
        consts = {"constant.L_MLLM": repr(state.mllm_constant), "constant.L_IMAGERL": repr(state.imagerl_constant)}
    update_manifest(run_dir, config_hash=cfg.hash(), scene_source=kind, **consts,
                    **_checksum(run_dir, "translator/model.bin"))
    return model


def translator_checkpoints(run_dir: Path) -> list[tuple[int, Path]]:
    ckpts = sorted((Path(run_dir) / "translator" / "ckpt").glob("step_*.bin"))
    return [(int(p.stem.split("_")[1]), p) for p in ckpts]

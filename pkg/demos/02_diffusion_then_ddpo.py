"""
Imagining scenes: DDPM pretraining then REINFORCE fine-tuning
=============================================================

A small denoiser learns p(scene | sentence). Policy-gradient steps then push
its samples toward scenes whose graph matches the sentence graph. Settings
are shrunk so the whole script runs in about a minute on one core.
"""

import tempfile
from pathlib import Path

import numpy as np

from imagemt import trainer
from imagemt.config import RunConfig
from imagemt.ddpo import collect_rollouts, scene_graph_reward_fn
from imagemt.reward import strict_lexicon
from imagemt.world import decode_scene, render_pair

cfg = RunConfig().replace(
    data__n_diffusion=1500, data__n_train=300, data__n_dev=20, data__n_test=20,
    diffusion__T=30, diffusion__hidden=64, diffusion__max_epochs=25, diffusion__n_val=200,
    ddpo__rl_steps=60, ddpo__contexts_per_step=16, ddpo__lr=3e-5, ddpo__n_holdout=100,
)
run = Path(tempfile.mkdtemp())
trainer.generate_data(cfg, run)

# stage 1: regress the posterior mean
trainer.pretrain_diffusion(cfg, run)
m = trainer.read_manifest(run)
print(f"DDPM validation loss {float(m['diffusion.initial_val']):.3f} -> {float(m['diffusion.final_val']):.3f}"
      f" in {m['diffusion.epochs']} epochs")

sched = trainer.schedule_for(cfg)
reward_fn = scene_graph_reward_fn(strict_lexicon())
dev = [ex.source for ex in trainer.load_split(run, "dev")]


def dev_reward(path):
    den = trainer.load_denoiser(cfg, path)
    batch = collect_rollouts(dev, den, sched, reward_fn, np.random.default_rng(0), 8)
    return batch.mean, den


before, den = dev_reward(run / "diffusion/denoiser.bin")

# a few imagined scenes for one sentence
sentence = dev[0]
batch = collect_rollouts([sentence], den, sched, reward_fn, np.random.default_rng(1), 4)
print("sentence:", " ".join(sentence))
for r in batch.rollouts:
    print(f"  reward {r.reward:.3f}  imagined:", " ".join(render_pair(decode_scene(r.trajectory.x0))[0]) or "<empty>")

# stage 2: REINFORCE on the scene-graph reward
trainer.finetune_ddpo(cfg, run)
log = trainer.read_ddpo_log(run)
r = [row["mean_reward"] for row in log]
print(f"rollout reward, first 10 steps {np.mean(r[:10]):.3f}, last 10 steps {np.mean(r[-10:]):.3f}")
after, _ = dev_reward(run / "ddpo/denoiser.bin")
print(f"dev reward {before:.3f} -> {after:.3f}")
h0 = float(trainer.read_manifest(run)["ddpo.holdout_before"])
print(f"held-out DDPM loss {h0:.4f} -> {log[-1]['ddpm_holdout_loss']:.4f}")

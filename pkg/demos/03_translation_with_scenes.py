"""
Where pictures help: the ambiguous split
========================================

Three small translators share one training set: text only, text plus the
true scene, and text plus an imagined scene. Only on ambiguous sources does
the scene carry information the sentence lacks.
"""

import tempfile
from pathlib import Path

from imagemt import evalsuite, trainer
from imagemt.config import RunConfig
from imagemt.rng import stream
from imagemt.translator import greedy_decode

base = RunConfig().replace(
    data__n_diffusion=1500, data__n_train=600, data__n_dev=40, data__n_test=200,
    diffusion__T=30, diffusion__hidden=64, diffusion__max_epochs=15, diffusion__n_val=200,
    ddpo__rl_steps=20, ddpo__contexts_per_step=16, ddpo__n_holdout=100,
    translator__epochs=6, translator__capture_batches=5,
)
run = Path(tempfile.mkdtemp())
trainer.generate_data(base, run)
trainer.pretrain_diffusion(base, run)
trainer.finetune_ddpo(base, run)
test = trainer.load_split(run, "test")

rows = {
    "text only": base.replace(ablation__use_diffusion=False),
    "true scene": base.replace(ablation__use_real_scenes=True),
    "imagined scene": base,
}
models = {}
for name, cfg in rows.items():
    d = run / "rows" / cfg.hash()
    trainer.train_translator(cfg, d, upstream=run)
    models[name] = (cfg, *trainer.load_translator(cfg, d / "translator/model.bin"))
    rep = evalsuite.evaluate(cfg, *models[name][1:], test)
    n, a = rep.splits["normal"], rep.splits["ambiguous"]
    print(f"{name:15s} BLEU normal {n.bleu:6.2f}  ambiguous {a.bleu:6.2f}   "
          f"token acc ambiguous {a.token_accuracy:.3f}   scene reward {rep.mean_reward:.3f}")

# one ambiguous sentence, decoded by each model
ex = next(e for e in test if e.split == "ambiguous")
print("\nsource:   ", " ".join(ex.source))
print("reference:", " ".join(ex.target))
for name, (cfg, tr, den) in models.items():
    x0, _ = evalsuite.eval_scenes(cfg, [ex], den, stream(cfg.data.seed, "eval", 0))
    print(f"{name:15s}", " ".join(greedy_decode([ex.source], x0, tr)[0]))

"""
Scenes, sentences and the scene-graph reward
============================================

A scene is a handful of coloured shapes on a 4x4 grid. Each scene renders to
a source sentence and a target sentence; an "ambiguous" source keeps only the
first colour, so the rest must come from the picture.
"""

import numpy as np

from imagemt.reward import reward, soft_lexicon, strict_lexicon
from imagemt.world import (
    decode_scene,
    encode_scene,
    extract_vsg,
    parse_lsg,
    render_pair,
    sample_scene,
    Triple,
)

rng = np.random.default_rng(7)
scene = sample_scene(rng)
while len(scene) < 3:
    scene = sample_scene(rng)
for o in scene.mentions():
    print(o)

# the two renderings of one scene
src, tgt = render_pair(scene, "normal")
amb, _ = render_pair(scene, "ambiguous")
print("source   :", " ".join(src))
print("ambiguous:", " ".join(amb))
print("target   :", " ".join(tgt))

# sentence graph from the text, scene graph from the picture
lsg = parse_lsg(src)
vsg = extract_vsg(scene)
for t in sorted(lsg):
    print("LSG", t)
for t in sorted(vsg):
    print("VSG", t)
print("reward(source, scene) =", reward(lsg, vsg, strict_lexicon()))

# an ambiguous sentence has fewer triples, and every one is still matched
print("reward(ambiguous, scene) =", reward(parse_lsg(amb), vsg, strict_lexicon()))

# recolour one object: its colour triple keeps 2 of 3 symbols
v = encode_scene(scene)
v[3:6] = np.roll(v[3:6], 1)  # first slot's colour one-hot
wrong = decode_scene(v)
print("recoloured:", " ".join(render_pair(wrong)[0]))
print("reward:", round(reward(lsg, extract_vsg(wrong), strict_lexicon()), 4))

# swap a relation by hand; the soft lexicon counts relations as 0.2 alike
swapped = {Triple(t.head, "left-of" if t.relation == "above" else "above", t.tail)
           if t.relation in ("above", "left-of") else t for t in vsg}
for name, lex in [("strict", strict_lexicon()), ("soft", soft_lexicon())]:
    print(f"{name:6s} reward, relations swapped:", round(reward(lsg, swapped, lex), 4))

# scene vectors survive noise smaller than the decoding margins
noisy = encode_scene(scene) + rng.normal(0, 0.05, 27)
print("decodes back after noise:", decode_scene(noisy) == scene)

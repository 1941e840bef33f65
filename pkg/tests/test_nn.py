import numpy as np
import pytest

from imagemt import autodiff as ad
from imagemt.autodiff import Tape, Tensor
from imagemt.nn import (
    Adam,
    Module,
    clip_by_global_norm,
    global_norm,
    load_checkpoint,
    load_modules,
    save_checkpoint,
    save_modules,
)


class Tiny(Module):
    def __init__(self, rng):
        super().__init__()
        self.w = self.param("w", rng.normal(size=(3, 2)))
        self.b = self.param("b", rng.normal(size=2))


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    opt = Adam([p], lr=0.1)
    opt.step([np.array([0.5, -4.0, 0.0])])
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=4))
    x, m, v = p.data.copy(), np.zeros(4), np.zeros(4)
    opt = Adam([p], lr=0.01)
    for t in range(1, 6):
        g = rng.normal(size=4)
        opt.step([g])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-14)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0, -1.0]))
    opt = Adam([p], lr=0.05)
    for _ in range(800):
        with Tape() as tape:
            loss = ad.sum_(ad.mul(p, p))
        opt.step(tape.gradient(loss, [p]))
    assert np.all(np.abs(p.data) < 1e-2)


def test_clip_by_global_norm():
    g = [np.array([3.0, 0.0]), np.array([[4.0]])]
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert global_norm(clipped) == pytest.approx(1.0, abs=1e-15)
    same, n2 = clip_by_global_norm(g, 10.0)
    assert n2 == 5.0 and all(np.array_equal(a, b) for a, b in zip(same, g))


def test_checkpoint_roundtrip_and_manifest(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a.w": rng.normal(size=(2, 3)), "b": rng.normal(size=5), "s": np.array(2.5)}
    path = tmp_path / "m.bin"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == np.shape(tensors[k])
        np.testing.assert_array_equal(back[k], tensors[k])
    assert (tmp_path / "m.bin.manifest").read_text() == "a.w 2x3\nb 5\ns scalar\n"
    assert path.read_bytes()[:8] == b"IMTC0001"


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.bin")


def test_save_and_load_modules(tmp_path):
    a, b = Tiny(np.random.default_rng(2)), Tiny(np.random.default_rng(3))
    save_modules(tmp_path / "t.bin", net=a)
    load_modules(tmp_path / "t.bin", net=b)
    for k, t in a.named_parameters().items():
        np.testing.assert_array_equal(b.named_parameters()[k].data, t.data)


def test_load_state_dict_checks_shapes_and_names():
    m = Tiny(np.random.default_rng(4))
    with pytest.raises(KeyError):
        m.load_state_dict({"w": np.zeros((3, 2))})
    with pytest.raises(ValueError):
        m.load_state_dict({"w": np.zeros((2, 2)), "b": np.zeros(2)})

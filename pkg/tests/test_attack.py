import math
import struct

import numpy as np
import pytest

from dtuap import autograd as ag
from dtuap.attack import (LOSS_ALIASES, AttackSpec, canonical_loss, circle_mask, craft, craft_multi2one, craft_patch,
                          load_perturbation, loss_nt, loss_t1, loss_t1_ce, loss_t2, loss_t2_ce, loss_total, norm_of,
                          project, read_perturbation_header, save_perturbation)
from dtuap.autograd import Tensor
from dtuap.data import Batch, BatchSampler, build_split
from dtuap.errors import ConfigError, DataError, NumericError
from dtuap.models import build
from oracles import cross_entropy_loop, loss_t1_loop, loss_t2_loop


def _val(t):
    return float(t.data)


# ---------------------------------------------------------------------------
# loss values


def test_loss_t1_examples():
    assert _val(loss_t1(Tensor([[5.0, 1.0, 0.0]]), [0])) == 4.0
    assert _val(loss_t1(Tensor([[1.0, 5.0, 0.0]]), [0])) == 0.0


def test_loss_t2_examples():
    assert _val(loss_t2(Tensor([[0.0, 3.0, 10.0]]), 2, dominance=5)) == -5.0
    assert _val(loss_t2(Tensor([[4.0, 3.0, 1.0]]), 2, dominance=5)) == 3.0


def test_loss_nt_examples():
    k = 50.0
    assert _val(loss_nt(Tensor(np.eye(4) * k), np.arange(4))) < 1e-15
    assert abs(_val(loss_nt(Tensor(np.zeros((3, 10))), [0, 4, 9])) - math.log(10)) < 1e-6


def test_losses_need_two_classes():
    with pytest.raises(ValueError):
        loss_t1(Tensor([[1.0], [2.0]]), [0, 0])


@pytest.mark.parametrize("seed", range(5))
def test_losses_match_loops(seed):
    rng = np.random.default_rng(seed)
    logits = (3 * rng.normal(size=(16, 7))).astype(np.float32)
    p = rng.integers(0, 7, size=16)
    sink, dom = int(rng.integers(0, 7)), float(rng.uniform(0, 8))
    assert abs(_val(loss_t1(Tensor(logits), p)) - loss_t1_loop(logits, p)) < 1e-6
    assert abs(_val(loss_t2(Tensor(logits), sink, dom)) - loss_t2_loop(logits, sink, dom)) < 1e-6
    assert abs(_val(loss_nt(Tensor(logits), p)) - cross_entropy_loop(logits, p)) < 1e-6
    assert abs(_val(loss_t1_ce(Tensor(logits), p)) + cross_entropy_loop(logits, p)) < 1e-6
    assert abs(_val(loss_t2_ce(Tensor(logits), sink)) - cross_entropy_loop(logits, [sink] * 16)) < 1e-6


def test_t2_floor_has_zero_gradient():
    x = Tensor([[0.0, 3.0, 10.0], [0.0, 1.0, 9.0]], requires_grad=True)
    ag.backward(loss_t2(x, 2, dominance=5))
    assert np.all(x.grad == 0)


def test_loss_aliases():
    assert canonical_loss("L_t+L_nt") == "dta"
    assert canonical_loss("L_t only") == "t_only"
    assert set(LOSS_ALIASES.values()) <= {"dta", "ce", "t_only", "t1", "t2"}
    with pytest.raises(ConfigError):
        canonical_loss("hinge")


# ---------------------------------------------------------------------------
# loss_total


class _Linear:
    """Victim whose logits are ``scale * flatten(x) @ W``."""

    num_classes = 3

    def __init__(self, w):
        self.w = Tensor(w)

    def __call__(self, x):
        return ag.dense(ag.flatten(x), self.w)


def _batch(images, preds, n_t):
    return Batch(np.asarray(images, np.float32), np.asarray(preds), np.arange(len(preds)), n_t)


def test_loss_total_components():
    rng = np.random.default_rng(0)
    victim = _Linear(rng.normal(size=(4, 3)) * 3)
    b = _batch(rng.uniform(size=(6, 1, 2, 2)), [0, 0, 0, 1, 2, 1], 3)
    delta = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    base = AttackSpec(sources=(0,), sink=2, alpha=1.0)
    _, c1 = loss_total(victim, b, delta, base)
    assert abs(c1["L"] - (c1["L_t1"] + c1["L_t2"] + c1["L_nt"])) < 1e-6
    _, c0 = loss_total(victim, b, delta, base.replace(alpha=0.0))
    assert c0["L"] == c0["L_t1"] + c0["L_t2"]
    _, c2 = loss_total(victim, b, delta, base.replace(alpha=2.0))
    lt = c1["L_t1"] + c1["L_t2"]
    assert abs((c2["L"] - lt) - 2 * (c1["L"] - lt)) < 1e-6


def test_loss_total_halves():
    """L_t sees only the first n_targeted rows and L_nt only the rest."""
    victim = _Linear(np.eye(4)[:, :3] * 10)
    imgs = np.zeros((2, 1, 2, 2))
    imgs[0, 0, 0, 0] = 1.0  # logits [10, 0, 0]
    imgs[1, 0, 0, 1] = 1.0  # logits [0, 10, 0]
    delta = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    _, c = loss_total(victim, _batch(imgs, [0, 1], 1), delta, AttackSpec(sources=(0,), sink=2))
    assert c["L_t1"] == 10.0 and c["L_t2"] == 10.0
    assert abs(c["L_nt"] - cross_entropy_loop([[0, 10, 0]], [1])) < 1e-6


def test_loss_total_needs_partition():
    victim = _Linear(np.ones((4, 3)))
    delta = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    b = _batch(np.zeros((2, 1, 2, 2)), [0, 1], 1)
    b.n_targeted = None
    with pytest.raises(ConfigError, match="partition"):
        loss_total(victim, b, delta, AttackSpec(sources=(0,), sink=2))


def test_dead_zone_gradient_is_exactly_zero():
    victim = _Linear(np.eye(4)[:, :3] * 10)
    imgs = np.zeros((4, 1, 2, 2))
    imgs[:, 0, 1, 0] = 1.0  # logits [0, 0, 10]: clean class 0 dethroned, sink dominant by 10 > D
    delta = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    loss, c = loss_total(victim, _batch(imgs, [0, 0, 0, 0], 4), delta, AttackSpec(sources=(0,), sink=2, dominance=5))
    assert c["L_t1"] == 0.0 and c["L_t2"] == -5.0
    ag.backward(loss)
    assert np.all(delta.grad == 0)


# ---------------------------------------------------------------------------
# projection


def test_project_linf_examples():
    eps = 0.1
    d = np.array([0.05, -0.02], np.float32)
    assert project(d, "linf", eps).tobytes() == d.tobytes()
    np.testing.assert_array_equal(project(np.array([2 * eps, -3 * eps], np.float32), "linf", eps),
                                  np.array([eps, -eps], np.float32))


def _l2_projection_oracle(x, eps):
    """Nearest point of the ball via bisection on the KKT multiplier."""
    if np.linalg.norm(x) <= eps:
        return x.copy()
    lo, hi = 0.0, 1e6
    for _ in range(200):
        lam = (lo + hi) / 2
        if np.linalg.norm(x / (1 + lam)) > eps:
            lo = lam
        else:
            hi = lam
    return x / (1 + hi)


def test_project_l2_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.normal(size=5) * rng.uniform(0.1, 3)
        eps = rng.uniform(0.2, 2)
        y = project(x.copy(), "l2", eps)
        ref = _l2_projection_oracle(x, eps)
        np.testing.assert_allclose(y, ref, rtol=1e-9, atol=1e-9)
        # no feasible sample point is closer
        cand = rng.normal(size=(2000, 5))
        cand *= (eps * rng.uniform(0, 1, size=(2000, 1)) ** 0.2) / np.linalg.norm(cand, axis=1, keepdims=True)
        assert np.linalg.norm(x - y) <= np.linalg.norm(x - cand, axis=1).min() + 1e-12


def test_project_rescale_mode():
    d = np.array([0.01, -0.02], np.float32)
    assert abs(norm_of(project(d, "linf", 0.1, mode="rescale"), "linf") - 0.1) < 1e-7
    assert abs(norm_of(project(d.astype(np.float64), "l2", 0.5, mode="rescale"), "l2") - 0.5) < 1e-12


# ---------------------------------------------------------------------------
# crafting


def _spec(**kw):
    base = dict(sources=(1,), sink=3, eps=0.3, iterations=60, batch_size=16)
    base.update(kw)
    return AttackSpec(**base)


def test_zero_iterations_gives_zero_delta(tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    s = _spec(iterations=0)
    pert = craft(tiny_victim, build_split(train, tiny_victim, s.sources), s)
    assert not pert.delta.any() and pert.log == []


@pytest.mark.parametrize("norm,eps", [("linf", 0.3), ("l2", 0.5)])
def test_budget_after_every_iteration(tiny_blobs, tiny_victim, norm, eps):
    train, _ = tiny_blobs
    s = _spec(norm=norm, eps=eps)
    seen = []
    craft(tiny_victim, build_split(train, tiny_victim, s.sources), s,
          callback=lambda it, d, c: seen.append(norm_of(d, norm)))
    assert len(seen) == s.iterations
    assert max(seen) <= eps + 1e-6


def test_craft_is_deterministic(tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    split = build_split(train, tiny_victim, (1,))
    a = craft(tiny_victim, split, _spec(seed=4))
    b = craft(tiny_victim, split, _spec(seed=4))
    c = craft(tiny_victim, split, _spec(seed=5))
    assert a.delta.tobytes() == b.delta.tobytes()
    assert a.delta.tobytes() != c.delta.tobytes()


def test_craft_log_decomposes(tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    s = _spec(alpha=0.7)
    pert = craft(tiny_victim, build_split(train, tiny_victim, s.sources), s)
    for row in pert.log:
        assert abs(row["L"] - (row["L_t1"] + row["L_t2"] + 0.7 * row["L_nt"])) <= 1e-6


def test_batches_use_frozen_clean_predictions(tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    split = build_split(train, tiny_victim, (1,))
    b = BatchSampler(split, 16, seed=0)(0)
    np.testing.assert_array_equal(b.clean_pred, split.clean_pred[b.positions])


def test_nan_loss_aborts(tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    split = build_split(train, tiny_victim, (1,))
    broken = build("mlp-2", train.image_shape, 4, hidden=16)
    broken.params["fc2.bias"].data[:] = np.nan
    with pytest.raises(NumericError, match="iteration 0"):
        craft(broken, split, _spec())


def test_spec_validation():
    with pytest.raises(ConfigError, match="sink"):
        AttackSpec(sources=(2,), sink=2)
    with pytest.raises(ConfigError):
        AttackSpec(sources=(1,), sink=2, batch_size=7)
    with pytest.raises(ConfigError):
        AttackSpec(sources=(1,), sink=2, eps=0)
    with pytest.raises(ConfigError):
        AttackSpec(sources=(1,), sink=2, norm="l1")
    with pytest.raises(ConfigError):
        AttackSpec(sources=(), sink=2)
    assert AttackSpec(sources=(1,), sink=2).eps == 15 / 255


def test_split_must_match_spec(tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    with pytest.raises(ConfigError):
        craft(tiny_victim, build_split(train, tiny_victim, (0,)), _spec())


# ---------------------------------------------------------------------------
# Multi2One and patches


def test_single_source_multi2one_equals_craft(tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    split = build_split(train, tiny_victim, (1,))
    a = craft(tiny_victim, split, _spec())
    b = craft_multi2one(tiny_victim, split, _spec())
    assert a.delta.tobytes() == b.delta.tobytes()


def test_multi2one_empty_pool(tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    split = build_split(train, tiny_victim, (0, 1))
    split.source_pools[0] = np.zeros(0, np.int64)
    with pytest.raises(DataError, match="source class 0"):
        craft_multi2one(tiny_victim, split, _spec(sources=(0, 1)))


def test_circle_mask():
    m = circle_mask((3, 7, 7), (3, 3), 1.0)
    assert m.shape == (3, 7, 7) and m.dtype == np.uint8
    assert m[0].sum() == 5 and np.array_equal(m[0], m[2])
    with pytest.raises(ConfigError):
        circle_mask((1, 7, 7), (3, 3), 0)
    with pytest.raises(ConfigError):
        circle_mask((1, 7, 7), (1, 1), 3)


def test_patch_support_and_range(tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    s = _spec()
    ranges = []
    pert = craft_patch(tiny_victim, build_split(train, tiny_victim, s.sources), s, (2.5, 2.5), 2.0,
                       callback=lambda it, d, c: ranges.append((np.abs(d).max())))
    outside = pert.mask == 0
    assert outside.any() and np.all(pert.delta[outside] == 0)
    assert max(ranges) <= 1.0
    adv = pert.apply(train.images)
    assert adv.min() >= 0 and adv.max() <= 1
    assert pert.norm == "patch" and pert.mask_desc["radius"] == 2.0


# ---------------------------------------------------------------------------
# DTAP files


def test_dtap_round_trip(tmp_path, tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    s = _spec(iterations=10)
    pert = craft_patch(tiny_victim, build_split(train, tiny_victim, s.sources), s, (2.5, 2.5), 2.0)
    pert.meta.update({"kappa_t": 0.5, "kappa_nt": 0.1})
    save_perturbation(pert, tmp_path / "a.dtap")
    loaded, header = load_perturbation(tmp_path / "a.dtap")
    assert loaded.delta.tobytes() == pert.delta.tobytes()
    assert loaded.mask.tobytes() == pert.mask.tobytes()
    assert loaded.spec == pert.spec
    assert header["kappa_t"] == 0.5 and header["mask"]["kind"] == "circle"
    save_perturbation(loaded, tmp_path / "b.dtap")
    assert (tmp_path / "a.dtap").read_bytes() == (tmp_path / "b.dtap").read_bytes()


def test_dtap_layout_and_corruption(tmp_path, tiny_blobs, tiny_victim):
    train, _ = tiny_blobs
    s = _spec(iterations=3)
    pert = craft(tiny_victim, build_split(train, tiny_victim, s.sources), s)
    path = tmp_path / "p.dtap"
    save_perturbation(pert, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DTAP" and struct.unpack("<I", raw[4:8])[0] == 1
    hlen = struct.unpack("<I", raw[8:12])[0]
    body = raw[12 + hlen:]
    assert body == pert.delta.astype("<f4").tobytes()
    header, _ = read_perturbation_header(path)
    assert header["shape"] == [1, 6, 6] and header["seed"] == 0
    (tmp_path / "m.dtap").write_bytes(b"DTAC" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        load_perturbation(tmp_path / "m.dtap")
    (tmp_path / "v.dtap").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(DataError, match="version"):
        load_perturbation(tmp_path / "v.dtap")
    (tmp_path / "t.dtap").write_bytes(raw[:-4])
    with pytest.raises(DataError, match="payload"):
        load_perturbation(tmp_path / "t.dtap")

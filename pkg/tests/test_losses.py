import numpy as np
import pytest

from oracles import FD_TOL, numeric_grad, relative_error
from poselift import geometry
from poselift.errors import ConfigError, ContractError
from poselift.geometry import run_cycle, sample_rotation
from poselift.losses import (
    LossWeights,
    lsgan_from_scores,
    lsgan_losses,
    masked_sq_norm,
    ninety_degree_loss,
    ninety_degree_terms,
    reprojection_loss,
    total_generator_loss,
)
from poselift.models import Discriminator, LifterModel, solve_architecture
from poselift.numerics import autodiff as ad
from poselift.numerics.autodiff import Tape, Var
from poselift.skeleton import LEG_TORSO


def tiny_lifter(rep="full", width=4, seed=0, dropout=0.0):
    arch = solve_architecture(rep, base_width=width, dropout=dropout)
    return LifterModel.create(arch, np.random.default_rng(seed))


def poses(rng, b=5):
    return rng.uniform(-1, 1, size=(b, 16, 2))


class ConstantD:
    def __init__(self, value):
        self.value = value

    def score(self, tape, poses, training, rng=None, update_stats=True):
        return Var(np.full(poses.shape[0], self.value))


# --- reprojection -----------------------------------------------------------


def test_reprojection_zero_and_single_keypoint(rng):
    Y = poses(rng, 1)[0]
    assert float(reprojection_loss(Y, Y).value) == 0.0
    back = Y.copy()
    back[4] += [0.3, 0.4]
    mask = np.zeros(16, dtype=bool)
    mask[4] = True
    assert float(reprojection_loss(Y, back, mask).value) == pytest.approx(0.25, abs=1e-15)
    mask[4], mask[5] = False, True
    assert float(reprojection_loss(Y, back, mask).value) == 0.0


def test_reprojection_batch_mean(rng):
    Y = poses(rng, 4)
    back = Y + rng.normal(size=Y.shape)
    expected = np.mean([np.sum((back[i] - Y[i]) ** 2) for i in range(4)])
    assert float(reprojection_loss(Y, back).value) == pytest.approx(expected, rel=1e-13)


def test_reprojection_contracts(rng):
    Y = poses(rng, 2)
    with pytest.raises(ContractError):
        reprojection_loss(Y, Y[:, :5])
    with pytest.raises(ContractError):
        reprojection_loss(Y, Y, np.zeros(16, dtype=bool))
    with pytest.raises(ContractError):
        masked_sq_norm(Var(Y), np.array([20]))


# --- 90-degree terms -------------------------------------------------------


def _vlift(fn):
    return lambda v: Var(fn(v.value))


def test_ninety_constructed_identity(rng):
    Y = poses(rng, 3)
    x = Y[..., 0]
    # G(a, y) = -a with z = x: the clockwise term vanishes.
    t_cw, _, _ = ninety_degree_terms(_vlift(lambda c: -c[..., 0]), Y, x)
    assert float(t_cw.value) == 0.0


def test_ninety_odd_lifter_has_zero_half_turn(rng):
    Y = poses(rng, 3)
    odd = _vlift(lambda c: np.sin(c[..., 0]) * (1 + c[..., 1] ** 2))
    z = odd(Var(Y)).value
    _, _, t_half = ninety_degree_terms(odd, Y, z)
    assert float(t_half.value) == pytest.approx(0.0, abs=1e-15)


def test_ninety_matches_straight_line_reference(rng):
    model = tiny_lifter(width=4, seed=0)
    Y = poses(rng, 6)
    z = model.predict(Y)
    got = float(ninety_degree_loss(lambda v: model.lift(None, v, False), Y, z).value)

    x, y = Y[..., 0], Y[..., 1]
    ref = 0.0
    for b in range(len(Y)):
        cw = model.predict(np.stack([z[b], y[b]], -1))
        acw = model.predict(np.stack([-z[b], y[b]], -1))
        mirror = model.predict(np.stack([-x[b], y[b]], -1))
        ref += np.sum((cw + x[b]) ** 2) + np.sum((acw - x[b]) ** 2) + np.sum((z[b] + mirror) ** 2)
    assert got == pytest.approx(ref / len(Y), rel=1e-12)


def test_ninety_mask_restricts_terms(rng):
    Y = poses(rng, 2)
    lift = _vlift(lambda c: c[..., 0] ** 2)
    z = lift(Var(Y)).value
    terms = ninety_degree_terms(lift, Y, z)
    mask = np.zeros(16, dtype=bool)
    mask[:6] = True
    masked = ninety_degree_terms(lift, Y, z, mask)
    rest = ninety_degree_terms(lift, Y, z, ~mask)
    for a, b, c in zip(terms, masked, rest):
        assert float(a.value) == pytest.approx(float(b.value) + float(c.value), rel=1e-12)


# --- LSGAN -----------------------------------------------------------------


def test_lsgan_constant_half():
    d, g = lsgan_from_scores(np.full(8, 0.5), np.full(8, 0.5))
    assert float(d.value) == 0.25 and float(g.value) == 0.125


def test_lsgan_perfect_discriminator():
    d, g = lsgan_from_scores(np.ones(4), np.zeros(4))
    assert float(d.value) == 0.0 and float(g.value) == 0.5


def test_lsgan_forced_flip_swaps_targets(rng):
    real, fake = rng.normal(size=6), rng.normal(size=6)
    d, g, flipped = lsgan_losses(ConstantD(0.0), real[:, None, None] * np.ones((6, 16, 2)), np.ones((6, 16, 2)),
                                 np.random.default_rng(0), 1.0)
    assert flipped and float(d.value) == pytest.approx(0.5)
    d_flip, g_flip = lsgan_from_scores(real, fake, flip=True)
    assert float(d_flip.value) == pytest.approx(0.5 * np.mean(real**2) + 0.5 * np.mean((fake - 1) ** 2))
    assert float(g_flip.value) == pytest.approx(0.5 * np.mean((fake - 1) ** 2))


def test_lsgan_flip_rate_within_binomial_bound():
    rng = np.random.default_rng(42)
    batch = np.zeros((2, 16, 2))
    D = ConstantD(0.3)
    n, p = 10_000, 0.1
    flips = sum(lsgan_losses(D, batch, batch, rng, p)[2] for _ in range(n))
    assert abs(flips - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_lsgan_contracts():
    with pytest.raises(ContractError):
        lsgan_from_scores(np.zeros(0), np.zeros(3))
    with pytest.raises(ConfigError):
        lsgan_losses(ConstantD(0.0), np.zeros((2, 16, 2)), np.zeros((2, 16, 2)), None, 1.5)


# --- weights and the total objective ------------------------------------------


def test_total_loss_examples():
    assert total_generator_loss(0.2, 0.3, 0.5, LossWeights(1, 1, 1)) == pytest.approx(1.0)
    assert total_generator_loss(0.2, 0.3, 0.5, LossWeights(0, 0, 0)) == 0.0


@pytest.mark.parametrize("which", ["adversarial", "reprojection", "ninety"])
def test_total_loss_linear_in_each_weight(which):
    comps = (0.7, 1.3, 2.9)
    base = dict(adversarial=0.4, reprojection=0.6, ninety=0.8)
    pos = ["adversarial", "reprojection", "ninety"].index(which)
    value = lambda w: total_generator_loss(*comps, LossWeights(**{**base, which: w}))  # noqa: E731
    assert value(2.0) - value(1.0) == pytest.approx(comps[pos])
    assert value(3.0) - value(1.0) == pytest.approx(2 * comps[pos])
    assert value(0.0) == pytest.approx(sum(c * base[k] for c, k in zip(comps, base) if k != which))


def test_weights_validation_and_parse():
    assert LossWeights.parse("1,0.5,2") == LossWeights(1.0, 0.5, 2.0)
    for bad in ("1,2", "a,b,c"):
        with pytest.raises(ConfigError):
            LossWeights.parse(bad)
    with pytest.raises(ConfigError):
        LossWeights(-1.0)
    with pytest.raises(ConfigError):
        LossWeights(1.0, per_network={"legs": float("nan")})
    assert LossWeights(1.0, per_network={"legs": 0.5}).adversarial_for("legs") == 0.5
    assert LossWeights(1.0, per_network={"legs": 0.5}).adversarial_for("torso") == 1.0


# --- finite-difference checks through the networks ----------------------------


def _fd_check(stores, loss_fn):
    # Errors are scaled by the largest gradient in the whole model, so exactly-zero
    # gradients (biases feeding batch norm) are judged against a meaningful scale.
    # These losses are strongly curved; a 1e-6 step keeps truncation error small.
    tape = Tape()
    grads = ad.backward(tape, loss_fn(tape), stores)
    pairs = []
    for store in stores:
        for name, arr in store.params.items():
            numeric = numeric_grad(lambda: float(loss_fn(Tape()).value), arr, 1e-6)
            pairs.append((grads[store.name][name], numeric))
    analytic = np.concatenate([a.ravel() for a, _ in pairs])
    numeric = np.concatenate([n.ravel() for _, n in pairs])
    worst = relative_error(analytic, numeric)
    assert worst < FD_TOL, worst


@pytest.fixture
def cycle_inputs(rng):
    Y = poses(rng, 6)
    R = sample_rotation(rng, size=6)
    return Y, R


def _train_lift(model, tape):
    # Training-mode lifts without dropout or running-stat updates are deterministic.
    return lambda v: model.lift(tape, v, True, None, update_stats=False)


@pytest.mark.parametrize("rep", ["full", "ind-lt", "sr-5"])
def test_reprojection_loss_gradient(rep, cycle_inputs):
    model = tiny_lifter(rep, width=4)
    Y, R = cycle_inputs

    def loss(tape):
        cyc = run_cycle(Var(Y), _train_lift(model, tape), R)
        return reprojection_loss(Y, cyc.y_back)

    _fd_check(model.stores, loss)


@pytest.mark.parametrize("rep", ["full", "ind-5"])
def test_ninety_loss_gradient(rep, cycle_inputs):
    model = tiny_lifter(rep, width=4)
    Y, _ = cycle_inputs

    def loss(tape):
        lift = _train_lift(model, tape)
        return ninety_degree_loss(lift, Var(Y), lift(Var(Y)))

    _fd_check(model.stores, loss)


def test_renormalized_cycle_gradient(schema, cycle_inputs, monkeypatch):
    # Offset and scale are constants of the graph, so the finite-difference
    # oracle freezes them at their values for the unperturbed parameters.
    model = tiny_lifter("full", width=4)
    Y, R = cycle_inputs
    hips = (schema.left_hip, schema.right_hip)
    frozen = {}
    real = geometry._renormalize

    def freeze(y, lh, rh):
        out, scale = real(y, lh, rh)
        if "mid" not in frozen:
            frozen["mid"] = 0.5 * (y.value[:, lh] + y.value[:, rh])
            frozen["scale"] = scale
        return (y - frozen["mid"][:, None, :]) * (1.0 / frozen["scale"])[:, None, None], frozen["scale"]

    monkeypatch.setattr(geometry, "_renormalize", freeze)

    def loss(tape):
        cyc = run_cycle(Var(Y), _train_lift(model, tape), R, True, hips)
        return reprojection_loss(Y, cyc.y_back)

    _fd_check(model.stores, loss)


def test_lsgan_gradients(cycle_inputs):
    model = tiny_lifter("full", width=4)
    D = Discriminator.create(4, np.random.default_rng(1), dropout=0.0)
    Y, R = cycle_inputs

    def d_loss(tape):
        fake = run_cycle(Var(Y), lambda v: model.lift(None, v, False), R).y_tilde.value
        real_s = D.score(tape, Var(Y), True, None, update_stats=False)
        fake_s = D.score(tape, Var(fake), True, None, update_stats=False)
        return lsgan_from_scores(real_s, fake_s)[0]

    def g_loss(tape):
        cyc = run_cycle(Var(Y), _train_lift(model, tape), R)
        fake_s = D.score(tape, cyc.y_tilde, True, None, update_stats=False)
        return lsgan_from_scores(Var(np.ones(len(Y))), fake_s)[1]

    _fd_check([D.store], d_loss)
    _fd_check(model.stores, g_loss)


def test_total_objective_gradient(cycle_inputs):
    model = tiny_lifter("sr-lt", width=4)
    D = Discriminator.create(4, np.random.default_rng(2), dropout=0.0)
    Y, R = cycle_inputs
    w = LossWeights(0.7, 1.3, 0.4)

    def loss(tape):
        lift = _train_lift(model, tape)
        cyc = run_cycle(Var(Y), lift, R)
        adv = lsgan_from_scores(Var(np.ones(len(Y))), D.score(tape, cyc.y_tilde, True, None, False))[1]
        return total_generator_loss(adv, reprojection_loss(Y, cyc.y_back), ninety_degree_loss(lift, Var(Y), cyc.z), w)

    _fd_check(model.stores, loss)


def test_masked_routing_keeps_torso_errors_out_of_leg_network(schema, cycle_inputs):
    model = tiny_lifter("ind-lt", width=4)
    Y, R = cycle_inputs
    torso_mask = schema.mask(schema.segment_indices(LEG_TORSO, "torso"))
    tape = Tape()
    lift = _train_lift(model, tape)
    cyc = run_cycle(Var(Y), lift, R)
    loss = reprojection_loss(Y, cyc.y_back, torso_mask) + ninety_degree_loss(lift, Var(Y), cyc.z, torso_mask)
    grads = ad.backward(tape, loss, model.stores)
    assert all(np.all(g == 0) for g in grads["lifter.legs"].values())
    assert any(np.any(g != 0) for g in grads["lifter.torso"].values())

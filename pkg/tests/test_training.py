import numpy as np
import pytest

from rlednet import metrics as M
from rlednet.checkpoint import OptimState
from rlednet.data import synthetic_pairs
from rlednet.network import ModelConfig, init_params
from rlednet.params import ParamTree
from rlednet.tensor import Tensor
from rlednet.training import (
    NonFiniteLossError,
    RANKS,
    TrainConfig,
    TreeMismatchError,
    ablation_configs,
    adam_step,
    evaluate,
    history_table,
    layer_widths,
    new_checkpoint,
    train,
    train_step,
)

pytestmark = pytest.mark.filterwarnings("ignore::rlednet.lsrb.RankWarning")

MINI = ModelConfig(c=8, n_enc=2, n_frb=2, window=2)
TCFG = TrainConfig(iterations=3, batch_size=2, patch_size=16, seed=1)


@pytest.fixture(scope="module")
def pairs():
    return synthetic_pairs(3, 24)


def scalar_tree(value):
    return ParamTree({"w": Tensor(np.array([value], dtype=np.float64), requires_grad=True)})


def test_adam_hand_computed_first_step():
    p = scalar_tree(1.0)
    state = OptimState(lr=1e-4)
    adam_step(p, {"w": np.array([1.0])}, state)
    # m_hat = v_hat = 1 on the first step
    expected = 1.0 - 1e-4 * 1.0 / (1.0 + 1e-8)
    assert abs(p["w"].data[0] - expected) < 1e-10
    assert state.step == 1


def test_adam_hand_computed_second_step():
    p = scalar_tree(0.0)
    state = OptimState(lr=0.1)
    adam_step(p, {"w": np.array([2.0])}, state)
    adam_step(p, {"w": np.array([-1.0])}, state)
    m = 0.9 * (0.1 * 2.0) + 0.1 * -1.0
    v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0
    m_hat, v_hat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    first = -0.1 * 2.0 / (2.0 + 1e-8)
    assert abs(p["w"].data[0] - (first - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8))) < 1e-12


def test_adam_zero_gradient_keeps_params():
    p = scalar_tree(0.5)
    adam_step(p, {"w": np.array([0.0])}, OptimState())
    assert p["w"].data[0] == 0.5


def test_adam_tree_mismatch():
    with pytest.raises(TreeMismatchError):
        adam_step(scalar_tree(0.0), {"v": np.array([1.0])}, OptimState())
    with pytest.raises(TreeMismatchError):
        adam_step(scalar_tree(0.0), {"w": np.array([1.0, 2.0])}, OptimState())


def test_zero_iterations_returns_init(pairs):
    ckpt, history = train(MINI, TCFG.__class__(iterations=0, patch_size=16), pairs)
    assert history == []
    ref = init_params(MINI, 0)
    for k in ref:
        np.testing.assert_array_equal(ckpt.params[k].data, ref[k].data)


def test_same_seed_identical_curves(pairs):
    _, a = train(MINI, TCFG, pairs)
    _, b = train(MINI, TCFG, pairs)
    assert [r["total"] for r in a] == [r["total"] for r in b]


def test_resume_matches_unbroken(pairs, tmp_path):
    from rlednet.checkpoint import load_checkpoint

    full_ckpt, full = train(MINI, TCFG.__class__(**{**TCFG.__dict__, "iterations": 4}), pairs)
    half_cfg = TCFG.__class__(**{**TCFG.__dict__, "iterations": 2})
    _, first = train(MINI, half_cfg, pairs, out=tmp_path / "half.ckpt")
    resumed = load_checkpoint(tmp_path / "half.ckpt", MINI)
    ckpt, second = train(MINI, half_cfg, pairs, resume=resumed)
    assert [r["total"] for r in first + second] == [r["total"] for r in full]
    for k in full_ckpt.params:
        np.testing.assert_array_equal(ckpt.params[k].data, full_ckpt.params[k].data)


def test_patch_divisibility_checked(pairs):
    with pytest.raises(ValueError):
        train(MINI, TrainConfig(iterations=1, patch_size=12), pairs)


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(MINI, TCFG, [])


def test_non_finite_loss_aborts(pairs):
    ckpt = new_checkpoint(MINI, TCFG)
    ckpt.params["frb.out.bias"].data[0] = np.nan
    low, normal = pairs[0].low[None, :, :16, :16], pairs[0].normal[None, :, :16, :16]
    with pytest.raises(NonFiniteLossError) as info:
        train_step(ckpt, low, normal, TCFG)
    assert info.value.step == 1
    assert "total" in info.value.terms


def test_gradient_clipping_runs(pairs):
    cfg = TrainConfig(iterations=1, batch_size=1, patch_size=16, clip_grad=1e-3)
    _, hist = train(MINI, cfg, pairs)
    assert np.isfinite(hist[0]["total"])


def test_periodic_eval_attached(pairs):
    cfg = TrainConfig(iterations=2, batch_size=1, patch_size=16, eval_interval=2)
    _, hist = train(MINI, cfg, pairs[:1])
    assert "eval" not in hist[0] and set(hist[1]["eval"]) == set(M.METRIC_NAMES)


def test_history_table(pairs):
    _, hist = train(MINI, TrainConfig(iterations=2, batch_size=1, patch_size=16), pairs)
    lines = history_table(hist).splitlines()
    assert lines[0] == "step,l1,ssim,tv,total"
    assert len(lines) == 3 and lines[1].startswith("1,")


def test_evaluate_identity_model_equals_raw_inputs(pairs):
    ckpt = new_checkpoint(MINI, TCFG)
    ckpt.params["frb.out.weight"].data[...] = 0.0
    ckpt.params["frb.out.bias"].data[...] = 0.0
    report = evaluate(ckpt, pairs)
    for row, pair in zip(report.rows, pairs):
        raw = M.image_metrics(pair.low, pair.normal)
        for k in M.METRIC_NAMES:
            assert row[k] == raw[k]
    for k in M.METRIC_NAMES:
        assert abs(report.means[k] - np.mean([r[k] for r in report.rows])) < 1e-9


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(new_checkpoint(MINI, TCFG), [])


def test_ablation_rows_and_channels():
    rows = ablation_configs(MINI)
    assert len(rows) == 4 + 5
    assert [cfg.r for name, cfg in rows if name.startswith("rank=")] == list(RANKS) == [2, 4, 8, 16, 32]
    base = layer_widths(MINI)
    for name, cfg in rows:
        assert layer_widths(cfg) == base, name


@pytest.mark.parametrize("kwargs", [dict(iterations=-1), dict(batch_size=0), dict(lr=0), dict(eval_interval=-1)])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)

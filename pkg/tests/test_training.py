import os

import numpy as np
import pytest

from dualswin import nn, synth, training
from dualswin.autodiff import Tensor
from dualswin.config import ModelConfig, TrainConfig
from dualswin.model import DualSwinUnet, load_checkpoint
from dualswin.nn import ParameterStore
from dualswin.training import (AdamW, TrainingDiverged, batch_arrays, clip_gradients,
                               evaluate_model, fit, lr_at, train_step)

RNG = np.random.default_rng(41)


def tiny_cfg(**kw):
    base = dict(img_size=16, patch_size=4, embed_dim=8, encoder_depths=(2,),
                decoder_depths=(2,), num_heads=(2, 2), window_size=2,
                skip_connection_count=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train(**kw):
    base = dict(batch_size=4, epochs=3, warmup_epochs=1, base_lr=1e-3,
                decay_epochs=30, decay_rate=0.1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule -----------------------------------------------------------------------

def test_lr_first_warmup_epoch():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(cfg.base_lr / 20)


def test_lr_at_warmup_end():
    cfg = TrainConfig()
    assert lr_at(20, cfg) == pytest.approx(cfg.base_lr)


def test_lr_step_decay():
    cfg = TrainConfig()
    assert lr_at(80, cfg) == pytest.approx(cfg.base_lr * 0.01)


def test_lr_continuous_at_warmup_boundary():
    cfg = TrainConfig()
    w = cfg.warmup_epochs
    start = cfg.base_lr / w
    warmup_branch_at_w = start + (cfg.base_lr - start) * (w / w)
    assert warmup_branch_at_w == pytest.approx(lr_at(w, cfg))


def test_lr_monotone_through_warmup():
    cfg = TrainConfig()
    values = [lr_at(e, cfg) for e in range(21)]
    assert all(b > a for a, b in zip(values, values[1:]))


# -- adamw -------------------------------------------------------------------------

def scalar_store(value=1.0):
    store = ParameterStore()
    store.add("theta", np.array([value], dtype=np.float64))
    return store


def test_adamw_hand_step():
    store = scalar_store(1.0)
    store["theta"].grad = np.array([1.0])
    opt = AdamW(store, betas=(0.9, 0.999), weight_decay=0.0)
    opt.step(lr=0.1)
    # bias-corrected moments are both ~g, update ~= lr
    assert store["theta"].data[0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_decoupled_weight_decay_term():
    plain = scalar_store(1.0)
    plain["theta"].grad = np.array([1.0])
    AdamW(plain, weight_decay=0.0).step(0.1)
    decayed = scalar_store(1.0)
    decayed["theta"].grad = np.array([1.0])
    AdamW(decayed, weight_decay=0.05).step(0.1)
    assert plain["theta"].data[0] - decayed["theta"].data[0] == pytest.approx(0.005, abs=1e-12)


def test_adamw_zero_grad_no_decay_is_fixed_point():
    store = scalar_store(2.5)
    store["theta"].grad = np.array([0.0])
    AdamW(store, weight_decay=0.0).step(0.1)
    assert store["theta"].data[0] == 2.5


def test_adamw_nan_gradient_names_parameter():
    store = scalar_store()
    store["theta"].grad = np.array([np.nan])
    with pytest.raises(TrainingDiverged, match="theta"):
        AdamW(store).step(0.1)


def test_adamw_deterministic():
    results = []
    for _ in range(2):
        store = scalar_store(1.0)
        opt = AdamW(store, weight_decay=0.01)
        for i in range(5):
            store["theta"].grad = np.array([0.3 * (i + 1)])
            opt.step(0.05)
        results.append(store["theta"].data.copy())
    assert np.array_equal(results[0], results[1])


# -- clipping -----------------------------------------------------------------------

def grads_store(values):
    store = ParameterStore()
    for i, v in enumerate(values):
        t = store.add(f"p{i}", np.zeros_like(np.asarray(v, dtype=np.float64)))
        t.grad = np.asarray(v, dtype=np.float64)
    return store


def test_clip_halves_when_double():
    store = grads_store([np.array([6.0, 8.0])])  # norm 10
    pre = clip_gradients(store, 5.0)
    assert pre == pytest.approx(10.0)
    assert np.allclose(store["p0"].grad, [3.0, 4.0])


def test_clip_noop_within_budget():
    g = np.array([1.0, 2.0, 2.0])  # norm 3
    store = grads_store([g])
    clip_gradients(store, 5.0)
    assert np.array_equal(store["p0"].grad, g)


def test_clip_global_norm_property():
    for _ in range(10):
        arrays = [RNG.standard_normal(RNG.integers(2, 6)) * RNG.uniform(0.5, 4)
                  for _ in range(3)]
        store = grads_store(arrays)
        pre = clip_gradients(store, 2.0)
        post = np.sqrt(sum(float(np.square(t.grad).sum()) for t in store.tensors()))
        assert post == pytest.approx(min(pre, 2.0), abs=1e-9)
        for t, orig in zip(store.tensors(), arrays):
            assert (np.sign(t.grad) == np.sign(orig)).all()


# -- train step ----------------------------------------------------------------------

def fixed_batch(n=4, img=16, seed=0):
    samples = synth.synth_generate(n, img, seed)
    return batch_arrays(samples, np.float32), samples


def test_train_step_decreases_loss_on_fixed_batch():
    model = DualSwinUnet(tiny_cfg(img_size=32, window_size=4), seed=0)
    tcfg = tiny_train(base_lr=3e-3, warmup_epochs=1, epochs=10)
    opt = AdamW(model.params, betas=tcfg.betas, weight_decay=tcfg.weight_decay)
    batch, _ = fixed_batch(img=32)
    first = train_step(model, batch, opt, tcfg, lr=3e-3)
    losses = [first]
    for _ in range(50):
        losses.append(train_step(model, batch, opt, tcfg, lr=3e-3))
    assert losses[-1] < 0.5 * first


def test_train_step_loss_bounded_at_init():
    model = DualSwinUnet(tiny_cfg(), seed=0)
    tcfg = tiny_train()
    opt = AdamW(model.params)
    batch, _ = fixed_batch()
    loss = train_step(model, batch, opt, tcfg, lr=0.0)
    assert 0.0 <= loss <= 1.0 + np.log(2.0)


def test_lr_zero_is_fixed_point():
    model = DualSwinUnet(tiny_cfg(), seed=0)
    tcfg = tiny_train(weight_decay=0.0)
    opt = AdamW(model.params, weight_decay=0.0)
    before = {k: v.copy() for k, v in model.params.state().items()}
    batch, _ = fixed_batch()
    train_step(model, batch, opt, tcfg, lr=0.0)
    after = model.params.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


# -- fit ----------------------------------------------------------------------------

def test_fit_writes_history_and_checkpoints(tmp_path):
    samples = synth.synth_generate(8, 16, seed=0)
    model = DualSwinUnet(tiny_cfg(), seed=0)
    tcfg = tiny_train(epochs=3)
    result = fit(model, samples[:6], samples[6:], tcfg, tmp_path)
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == training.HISTORY_HEADER
    assert len(lines) == 1 + 3
    assert os.path.exists(result.best_path)
    assert os.path.exists(result.last_path)
    assert result.best_val_dice_ptmc >= 0.0


def test_fit_best_dice_monotone(tmp_path):
    samples = synth.synth_generate(8, 16, seed=1)
    model = DualSwinUnet(tiny_cfg(), seed=1)
    tcfg = tiny_train(epochs=4, base_lr=2e-3)
    fit(model, samples[:6], samples[6:], tcfg, tmp_path)
    # best checkpoint meta carries a non-decreasing best dice by construction;
    # verify the recorded best matches the max of history
    hist = (tmp_path / "history.csv").read_text().splitlines()[1:]
    dices = [float(line.split(",")[5]) for line in hist]
    _, _, _, meta = load_checkpoint(tmp_path / "checkpoint_best.dswc")
    assert float(meta["best_val_dice_ptmc"]) == pytest.approx(max(dices), abs=0)


def test_fit_deterministic_same_seed(tmp_path):
    samples = synth.synth_generate(8, 16, seed=2)
    histories = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        model = DualSwinUnet(tiny_cfg(), seed=5)
        fit(model, samples[:6], samples[6:], tiny_train(seed=5, epochs=2), out)
        histories.append((out / "history.csv").read_bytes())
    assert histories[0] == histories[1]


def test_fit_resume_reproduces_uninterrupted_run_bitwise(tmp_path):
    samples = synth.synth_generate(8, 16, seed=3)
    tcfg = tiny_train(epochs=4, seed=7)

    full_dir = tmp_path / "full"
    model_full = DualSwinUnet(tiny_cfg(), seed=7)
    fit(model_full, samples[:6], samples[6:], tcfg, full_dir)

    part_dir = tmp_path / "part"
    model_part = DualSwinUnet(tiny_cfg(), seed=7)
    fit(model_part, samples[:6], samples[6:], tcfg, part_dir, epochs_override=2)
    model_resume = DualSwinUnet(tiny_cfg(), seed=7)
    fit(model_resume, samples[:6], samples[6:], tcfg, part_dir, resume=True)

    assert (full_dir / "history.csv").read_bytes() == (part_dir / "history.csv").read_bytes()
    assert (full_dir / "checkpoint_last.dswc").read_bytes() == \
        (part_dir / "checkpoint_last.dswc").read_bytes()
    for k, v in model_full.params.state().items():
        assert np.array_equal(v, model_resume.params.state()[k])


def test_fit_empty_val_falls_back_to_train(tmp_path):
    samples = synth.synth_generate(4, 16, seed=4)
    model = DualSwinUnet(tiny_cfg(), seed=0)
    result = fit(model, samples, [], tiny_train(epochs=1), tmp_path)
    assert result.best_val_dice_ptmc >= 0.0


def test_evaluate_model_shares_metrics_code_path(tmp_path):
    from dualswin import metrics as m

    samples = synth.synth_generate(4, 16, seed=5)
    model = DualSwinUnet(tiny_cfg(), seed=0)
    reports = evaluate_model(model, samples, threshold=0.5)
    report, rows, probs, gts = reports["ptmc"]
    assert report.latency_mean_s is not None and report.latency_mean_s > 0
    # recompute through the metrics module directly (no timing there)
    again, _ = m.evaluate_decoder(probs, gts, 0.5)
    report.latency_mean_s = report.latency_std_s = None
    assert report == again


def test_evaluate_model_empty_error():
    model = DualSwinUnet(tiny_cfg(), seed=0)
    with pytest.raises(Exception, match="empty"):
        evaluate_model(model, [], threshold=0.5)


def test_nonfinite_loss_aborts_and_keeps_last_checkpoint(tmp_path):
    samples = synth.synth_generate(4, 16, seed=6)
    model = DualSwinUnet(tiny_cfg(), seed=0)
    tcfg = tiny_train(epochs=1)
    fit(model, samples, [], tcfg, tmp_path)
    good = (tmp_path / "checkpoint_last.dswc").read_bytes()
    # poison a weight; the next run's first forward emits a non-finite loss
    model.params["head2.weight"].data = np.full_like(model.params["head2.weight"].data, np.nan)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        fit(model, samples, [], tcfg, tmp_path / "crash")
    assert (tmp_path / "checkpoint_last.dswc").read_bytes() == good

import math

import numpy as np
import pytest

from repre import tensor as T
from repre.contrastive import BranchState, ViewOutputs, symmetrized_contrast
from repre.encoder import Encoder
from repre.objective import NonFiniteLossError
from repre.pipeline.data import augment_two_views, synthetic_shapes
from repre.pipeline.optim import lr_at
from repre.pipeline.train import Trainer, pretrain, psnr, read_metrics


def metrics_without_clock(records):
    return [{k: v for k, v in vars(r).items() if k != "wall_clock"} for r in records]


def test_same_seed_bit_identical_metrics(tiny):
    a = Trainer(tiny()).run()
    b = Trainer(tiny()).run()
    assert len(a) == 6
    assert metrics_without_clock(a) == metrics_without_clock(b)
    c = Trainer(tiny(seed=4)).run()
    assert metrics_without_clock(a) != metrics_without_clock(c)


@pytest.mark.parametrize("mode,queue", [("with_negatives", 16), ("with_negatives", 0), ("without_negatives", 0)])
def test_contrastive_modes_train(tiny, mode, queue):
    recs = Trainer(tiny(contrastive_mode=mode, queue_size=queue, steps=3)).run()
    assert all(math.isfinite(r.combined) for r in recs)


def test_zero_lr_leaves_online_params_but_applies_ema(tiny):
    tr = Trainer(tiny(lr=0.0, momentum=0.5))
    # make the target differ so the EMA has something to move
    for _, _, tgt in tr.branch.aligned_pairs():
        tgt.data = tgt.data + 1.0
    before = {k: p.data.copy() for k, p in tr.optimizer.params.items()}
    target_before = [t.data.copy() for _, _, t in tr.branch.aligned_pairs()]
    tr.run(steps=1)
    for k, p in tr.optimizer.params.items():
        assert np.array_equal(p.data, before[k]), k
    for t0, (_, online, tgt) in zip(target_before, tr.branch.aligned_pairs()):
        np.testing.assert_allclose(tgt.data, 0.5 * t0 + 0.5 * online.data, rtol=0, atol=1e-15)


def test_stop_gradient_after_train_step(tiny):
    tr = Trainer(tiny())
    for _ in range(2):
        tr.train_step(tr.batch_views(tr.step))
        for p in tr.branch.target_parameters():
            assert p.grad is None or not p.grad.any()
    in_optim = {id(p) for p in tr.optimizer.params.values()}
    assert not in_optim & {id(p) for p in tr.branch.target_parameters()}


def test_optimizer_owns_exactly_the_trainable_parameters(tiny):
    names = set(Trainer(tiny()).optimizer.params)
    assert {"weights.s_contrast", "weights.s_reconstruct"} <= names
    assert any(n.startswith("decoder.") for n in names)
    assert not any("target" in n for n in names)
    solo = set(Trainer(tiny(reconstruction=False)).optimizer.params)
    assert not any(n.startswith(("decoder.", "weights.")) for n in solo)


def test_lambdas_positive_and_finite(tiny):
    for r in Trainer(tiny(steps=4, lr=0.05)).run():
        assert 0 < r.lambda_contrast < math.inf and 0 < r.lambda_reconstruct < math.inf


def test_contrastive_only_matches_hand_rolled_loop(tiny):
    """Independent oracle: plain contrastive loss, hand-written AdamW, EMA and FIFO queue."""
    cfg = tiny(reconstruction=False, steps=4)
    trainer = Trainer(cfg)
    got = [r.l_contrast for r in trainer.run()]

    images, _ = synthetic_shapes(cfg.dataset_size, cfg.dataset_seed, cfg.image_size, cfg.num_classes)
    enc_seq, head_seq, _ = np.random.SeedSequence(cfg.seed).spawn(3)
    enc = Encoder(cfg.encoder_config(), np.random.default_rng(enc_seq))
    branch = BranchState(enc, cfg.head_config(), cfg.contrastive_mode, cfg.momentum, cfg.queue_size,
                         np.random.default_rng(head_seq))
    params = dict(branch.named_parameters())
    m = {k: np.zeros_like(p.data) for k, p in params.items()}
    v = {k: np.zeros_like(p.data) for k, p in params.items()}
    b1, b2 = 0.9, 0.999
    warm = max(1, round(cfg.warmup_frac * cfg.steps))
    expected = []
    for step in range(cfg.steps):
        lr = cfg.lr * (step + 1) / warm if step < warm else \
            0.5 * cfg.lr * (1 + math.cos(math.pi * (step - warm) / (cfg.steps - warm)))
        assert lr == pytest.approx(lr_at(step, cfg.steps, cfg.lr, cfg.warmup_frac), abs=1e-18)
        r = np.random.default_rng([cfg.seed, step])
        idx = r.choice(len(images), size=cfg.batch_size, replace=False)
        _, v1, v2 = augment_two_views(images[idx], cfg.augmentation(), r)
        T.reset_tape()
        for p in params.values():
            p.grad = None
        both = np.concatenate([v1, v2])
        rep, _ = enc(both)
        q, k = branch.query(rep), branch.key(both)
        b = cfg.batch_size
        loss = symmetrized_contrast(ViewOutputs(q[:b], k[:b]), ViewOutputs(q[b:], k[b:]),
                                    cfg.contrastive_mode, branch.queue, cfg.tau)
        T.backward(loss)
        expected.append(float(loss.data))
        t = step + 1
        for name, p in params.items():
            g = p.grad
            m[name] = b1 * m[name] + (1 - b1) * g
            v[name] = b2 * v[name] + (1 - b2) * g * g
            upd = (m[name] / (1 - b1 ** t)) / (np.sqrt(v[name] / (1 - b2 ** t)) + 1e-8)
            if p.ndim >= 2 and name.endswith("weight"):
                upd = upd + cfg.weight_decay * p.data
            p.data = p.data - lr * upd
        for _, online, tgt in branch.aligned_pairs():
            tgt.data = cfg.momentum * tgt.data + (1 - cfg.momentum) * online.data
        keys = np.concatenate([k[:b], k[b:]])
        keys = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        branch.queue.entries = np.concatenate([branch.queue.entries, keys])[-cfg.queue_size:]
    assert got == expected
    assert trainer.encoder.fingerprint() == enc.fingerprint()


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_loss_names_the_term(tiny):
    tr = Trainer(tiny())
    tr.branch.queue.entries[:] = np.nan
    with pytest.raises(NonFiniteLossError, match="l_contrast"):
        tr.train_step(tr.batch_views(0))
    tr = Trainer(tiny())
    tr.decoder.head.weight.data[:] = np.inf
    with pytest.raises(NonFiniteLossError, match="l_reconstruct"):
        tr.train_step(tr.batch_views(0))


def test_non_finite_gradient_never_reaches_the_optimizer(tiny, monkeypatch):
    import repre.pipeline.train as train_mod

    tr = Trainer(tiny())
    real_backward = T.backward

    def poisoned(loss):
        real_backward(loss)
        tr.encoder.patch_proj.weight.grad[0, 0] = np.inf

    monkeypatch.setattr(train_mod.T, "backward", poisoned)
    before = tr.encoder.fingerprint()
    with pytest.raises(NonFiniteLossError, match="gradient of online.encoder.patch_proj.weight"):
        tr.train_step(tr.batch_views(0))
    assert tr.encoder.fingerprint() == before
    assert tr.optimizer.t == 0


def test_psnr_definition():
    assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(np.ones(2), np.ones(2)) == math.inf
    assert psnr(np.full(2, 1e300), np.zeros(2)) == -math.inf


def test_pretrain_writes_metrics_config_and_checkpoint(tiny, tmp_path):
    cfg = tiny(out_dir=str(tmp_path / "run"), steps=3)
    pretrain(cfg)
    recs = read_metrics(tmp_path / "run" / "metrics.jsonl")
    assert [r["step"] for r in recs] == [1, 2, 3]
    assert {"l_contrast", "l_reconstruct", "combined", "lambda_contrast", "lambda_reconstruct", "psnr",
            "param_ratio", "flop_ratio", "wall_clock"} <= set(recs[0])
    assert (tmp_path / "run" / "config.txt").exists()
    assert (tmp_path / "run" / "checkpoint.bin").exists()


def test_empty_training_set(tiny):
    with pytest.raises(ValueError, match="empty"):
        Trainer(tiny(), images=np.zeros((0, 16, 16, 3)))

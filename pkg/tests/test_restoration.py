import numpy as np
import pytest
import torch

from conftest import tiny_config
from vlmir.alignment import build_stage1_model, train_stage1
from vlmir.config import RunConfig
from vlmir.manifest import DatasetManifest, ManifestError
from vlmir.restoration import (
    IncompatibleCheckpointError,
    check_compatible,
    load_stage2,
    restore,
    restore_batch,
    sample,
    stage2_loss,
    train_stage2,
)
from vlmir.sde import NoiseSchedule, forward_marginal, forward_sample, reconstruct_x0
from vlmir.unet import ConditionalUNet


def _pair(seed=0, shape=(2, 3, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=torch.float64), torch.rand(shape, generator=g, dtype=torch.float64)


def _oracle_x0(x0, mu, schedule):
    """x0 recovered from the exact noise of each state."""

    def x0_fn(x, i):
        mean, std = forward_marginal(x0, mu, schedule, i)
        return reconstruct_x0(x, mu, (x - mean) / std, schedule, i)

    return x0_fn


def test_oracle_sampler_recovers_x0():
    schedule = NoiseSchedule.quadratic(50)
    x0, mu = _pair()
    x_T = mu + schedule.lam * torch.randn(mu.shape, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    trace = []
    out = sample(mu, _oracle_x0(x0, mu, schedule), schedule, x_T, trace)
    assert float((out - x0).abs().max()) < 1e-9
    assert len(trace) == schedule.T


class _OracleNet:
    """Stands in for the U-Net by returning the noise used in the forward draw."""

    def __init__(self, noise):
        self.noise = noise

    def __call__(self, x, mu, t, *cond):
        return self.noise


def test_stage2_loss_zero_for_true_noise():
    schedule = NoiseSchedule.quadratic(20)
    x0, mu = _pair()
    noise = torch.randn(x0.shape, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    i = torch.tensor([1, 17])
    cond = {"text": None, "image": None, "degradation": None}
    assert float(stage2_loss(_OracleNet(noise), x0, mu, cond, schedule, i, noise)) < 1e-12
    off = stage2_loss(_OracleNet(noise + 0.1), x0, mu, cond, schedule, i, noise)
    assert float(off) > 0
    # the forward draw used inside the loss is the marginal sample
    assert torch.equal(forward_sample(x0, mu, schedule, i, noise), forward_sample(x0, mu, schedule, i, noise))


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    cfg = tiny_config()
    out = tmp_path_factory.mktemp("s2")
    stage1 = train_stage1(tiny_corpus, cfg).model
    res = train_stage2(tiny_corpus, stage1, cfg, out)
    return cfg, stage1, res, out


def test_training_writes_checkpoint_and_log(trained):
    cfg, _, res, out = trained
    assert (out / "loss.csv").exists() and res.checkpoint == out / "checkpoint"
    assert [r["step"] for r in res.log] == list(range(cfg.stage2.steps))
    assert all(np.isfinite(r["loss"]) for r in res.log)


def test_training_is_deterministic(trained, tiny_corpus, tmp_path):
    cfg, stage1, res, out = trained
    again = train_stage2(tiny_corpus, stage1, cfg, tmp_path)
    assert (tmp_path / "loss.csv").read_bytes() == (out / "loss.csv").read_bytes()
    for k, v in res.net.state_dict().items():
        assert torch.equal(again.net.state_dict()[k], v)


def test_checkpoint_round_trip(trained):
    cfg, _, res, out = trained
    net, schedule, meta = load_stage2(out / "checkpoint")
    assert meta["embed_dim"] == cfg.encoder.embed_dim and meta["text_mode"] == "caption"
    assert schedule.matches(res.schedule)
    for k, v in res.net.state_dict().items():
        assert torch.equal(net.state_dict()[k], v)


def test_stage1_checkpoint_is_not_stage2(tiny_corpus, tmp_path):
    ck = train_stage1(tiny_corpus, tiny_config(), tmp_path).checkpoint
    with pytest.raises(IncompatibleCheckpointError):
        load_stage2(ck)


def test_embed_dim_mismatch_is_rejected(trained):
    _, _, res, _ = trained
    wide = build_stage1_model(RunConfig())
    with pytest.raises(IncompatibleCheckpointError, match="embed_dim"):
        check_compatible(wide, res.net)
    with pytest.raises(IncompatibleCheckpointError, match="schedule"):
        check_compatible(build_stage1_model(tiny_config()), res.net, NoiseSchedule.quadratic(7), res.schedule)


def test_caption_mode_needs_captions(tiny_corpus):
    records = [r for r in tiny_corpus.records[:2]]
    stripped = DatasetManifest([type(r)(**{**r.__dict__, "lq_caption": None}) for r in records], root=tiny_corpus.root)
    cfg = tiny_config()
    with pytest.raises(ManifestError):
        train_stage2(stripped, build_stage1_model(cfg), cfg)


def test_restore_is_deterministic_and_keyed(trained, tiny_corpus):
    _, stage1, res, _ = trained
    lqs = [tiny_corpus.load_pair(r)[1] for r in tiny_corpus.records[:2]]
    caps = [r.lq_caption for r in tiny_corpus.records[:2]]
    a = restore_batch(lqs, caps, stage1, res.net, res.schedule, seed=4)
    b = restore_batch(lqs, caps, stage1, res.net, res.schedule, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    alone = restore(lqs[0], caps[0], stage1, res.net, res.schedule, seed=4)
    # batch composition only changes floating-point reduction order
    np.testing.assert_allclose(alone, a[0], atol=1e-4)
    other = restore_batch(lqs, caps, stage1, res.net, res.schedule, seed=5)
    assert not np.array_equal(other[0], a[0])
    assert a[0].shape == lqs[0].shape and a[0].min() >= 0 and a[0].max() <= 1


def test_restore_handles_odd_sizes_and_mixed_shapes(trained, tiny_corpus):
    _, stage1, res, _ = trained
    lq = tiny_corpus.load_pair(tiny_corpus.records[0])[1]
    odd, square = lq[:31, :29], lq
    out = restore_batch([odd, square], ["a", "b"], stage1, res.net, res.schedule)
    assert out[0].shape == odd.shape and out[1].shape == square.shape


def test_restore_text_modes(trained, tiny_corpus):
    _, stage1, res, _ = trained
    lq = tiny_corpus.load_pair(tiny_corpus.records[0])[1]
    for mode in ("caption", "fixed", "null"):
        out = restore(lq, None if mode == "null" else "a red circle", stage1, res.net, res.schedule, text_mode=mode)
        assert np.isfinite(out).all()


def test_trace_dump(trained, tiny_corpus, tmp_path):
    from vlmir.checkpoint import load_checkpoint

    _, stage1, res, _ = trained
    lq = tiny_corpus.load_pair(tiny_corpus.records[0])[1]
    restore_batch([lq], ["x"], stage1, res.net, res.schedule, keys=["img"], trace_dir=tmp_path)
    tensors, meta = load_checkpoint(tmp_path / "trace_img")
    assert meta["T"] == res.schedule.T and len(tensors) == res.schedule.T
    assert "img/x_0000" in tensors


def test_unet_type(trained):
    assert isinstance(trained[2].net, ConditionalUNet)


def test_predict_x0_reads_network_output_by_mode():
    from vlmir.config import ConfigError, UNetConfig
    from vlmir.restoration import predict_x0

    schedule = NoiseSchedule.quadratic(20)
    x, mu = _pair(3, (1, 3, 8, 8))
    out = torch.full_like(x, 0.25)

    class Fixed:
        def __init__(self, prediction):
            self.config = UNetConfig(prediction=prediction)

        def __call__(self, *args):
            return out

    cond = {"text": None, "image": None, "degradation": None}
    assert torch.equal(predict_x0(Fixed("x0"), x, mu, 5, cond, schedule), mu + out)
    assert torch.equal(predict_x0(Fixed("eps"), x, mu, 5, cond, schedule), reconstruct_x0(x, mu, out, schedule, 5))
    with pytest.raises(ConfigError):
        UNetConfig(prediction="v")


def test_x0_prediction_trains_and_round_trips(tiny_corpus, tmp_path):
    cfg = tiny_config()
    cfg.unet.prediction = "x0"
    stage1 = build_stage1_model(cfg)
    res = train_stage2(tiny_corpus, stage1, cfg, tmp_path)
    net, _, meta = load_stage2(res.checkpoint)
    assert net.config.prediction == "x0" and meta["unet"]["prediction"] == "x0"
    lq = tiny_corpus.load_pair(tiny_corpus.records[0])[1]
    out = restore(lq, "a photo", stage1, net, res.schedule)
    assert out.shape == lq.shape and np.isfinite(out).all()

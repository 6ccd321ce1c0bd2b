"""Loss arithmetic, plateau schedule, freeze/determinism contracts, and
small training-run oracles."""

import numpy as np
import pytest
import torch

from refcodec.selector import ReferenceSet, build_cache, build_triplets
from refcodec.tensors import ContractError
from refcodec.trainer import (
    ConfigError,
    PlateauScheduler,
    TrainConfig,
    finetune_recycled,
    evaluate,
    lambda_sweep,
    parse_config,
    pretrain_codec,
    rd_loss,
    train_base,
)

from conftest import TINY, make_corpus
from gradcheck import central_diff_grad, rel_err


def tiny_config(**kw):
    defaults = dict(
        lmbda=0.008,
        steps=20,
        batch_size=2,
        patch=64,
        seed=0,
        eval_every=5,
        model=TINY,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(seed=42, n_inputs=6, n_refs=4, h=64, w=64)


class TestRdLoss:
    def test_identical_images(self):
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        loss = rd_loss(x, x, torch.tensor(1000.0, dtype=torch.float64),
                       torch.tensor(200.0, dtype=torch.float64), 0.01, 1000)
        assert abs(loss.item() - 1.2) < 1e-9

    def test_arithmetic_example(self):
        # lambda=0.01, 255^2*MSE = 10, bpp total 0.5 -> 0.6
        x = torch.zeros(1, 3, 10, 10)
        mse = 10.0 / 255.0**2
        x_hat = x + np.sqrt(mse)
        loss = rd_loss(x, x_hat, torch.tensor(40.0), torch.tensor(10.0), 0.01, 100)
        assert abs(loss.item() - 0.6) < 1e-5

    def test_lambda_zero_is_pure_rate(self):
        x = torch.rand(1, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        x_hat = torch.rand(1, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        loss = rd_loss(x, x_hat, torch.tensor(32.0, dtype=torch.float64),
                       torch.tensor(16.0, dtype=torch.float64), 0.0, 16)
        assert abs(loss.item() - 3.0) < 1e-9

    def test_rate_additivity(self):
        x = torch.rand(1, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
        x_hat = x * 0.9
        by, bz = torch.tensor(100.0, dtype=torch.float64), torch.tensor(50.0, dtype=torch.float64)
        full = rd_loss(x, x_hat, by, bz, 0.01, 16)
        split = rd_loss(x, x_hat, by, torch.tensor(0.0), 0.01, 16) + 50.0 / 16
        assert abs(full.item() - split.item()) < 1e-6

    def test_gradient_wrt_reconstruction(self):
        g = torch.Generator().manual_seed(4)
        x = torch.rand(1, 3, 4, 4, dtype=torch.float64, generator=g)
        x_hat0 = torch.rand(1, 3, 4, 4, dtype=torch.float64, generator=g)

        x_hat = x_hat0.clone().requires_grad_(True)
        loss = rd_loss(x, x_hat, torch.tensor(10.0), torch.tensor(5.0), 0.01, 16)
        (analytic,) = torch.autograd.grad(loss, x_hat)
        probe = x_hat0.clone()
        fd = central_diff_grad(
            lambda: rd_loss(x, probe, torch.tensor(10.0), torch.tensor(5.0), 0.01, 16),
            probe,
        )
        assert rel_err(analytic, fd) <= 1e-4


class TestPlateauScheduler:
    def _make(self):
        opt = torch.optim.Adam([torch.nn.Parameter(torch.zeros(1))], lr=1e-4)
        return PlateauScheduler(opt, factor=0.5, patience=10, min_delta=1e-4, floor=1e-6)

    def test_constant_loss_halves_after_ten_evals(self):
        sched = self._make()
        sched.step(1.0)  # initial best
        for k in range(9):
            sched.step(1.0)
            assert sched.lr == 1e-4, f"halved too early at eval {k + 2}"
        sched.step(1.0)  # 10th non-improving eval
        assert sched.lr == 5e-5

    def test_improvement_resets_patience(self):
        sched = self._make()
        sched.step(1.0)
        for _ in range(9):
            sched.step(1.0)
        sched.step(0.5)  # real improvement
        for _ in range(9):
            sched.step(0.5)
        assert sched.lr == 1e-4

    def test_floor_respected(self):
        sched = self._make()
        sched.step(1.0)
        for _ in range(2000):
            sched.step(1.0)
        assert sched.lr >= 1e-6

    def test_tiny_improvement_counts_as_plateau(self):
        sched = self._make()
        sched.step(1.0)
        for _ in range(10):
            sched.step(1.0 - 1e-6)  # below min_delta: still a plateau
        assert sched.lr == 5e-5


class TestConfig:
    def test_parse_and_overrides(self):
        cfg = parse_config("lmbda = 0.004\nsteps=10\n# comment\n", {"batch_size": "2"})
        assert cfg.lmbda == 0.004 and cfg.steps == 10 and cfg.batch_size == 2

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("warp_drive=1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("steps=banana\n")

    def test_model_width_keys(self):
        cfg = parse_config("latent_ch=24\nhyper_ch=16\nref_ch=8\nres_ch=16\n")
        assert cfg.model.latent_ch == 24

    def test_invalid_lambda_rejected(self):
        with pytest.raises((ConfigError, ContractError)):
            parse_config("lmbda=0\n")

    def test_patch_divisibility(self):
        with pytest.raises(ContractError):
            TrainConfig(patch=100)


class TestTrainBase:
    def test_zero_steps_returns_initialized(self, corpus):
        inputs, _ = corpus
        model, state = train_base(tiny_config(steps=0), inputs)
        assert not model.is_trained
        assert len(state.log) == 1

    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractError):
            train_base(tiny_config(), [])

    def test_seeded_determinism(self, corpus):
        inputs, _ = corpus
        m1, s1 = train_base(tiny_config(steps=8), inputs)
        m2, s2 = train_base(tiny_config(steps=8), inputs)
        assert s1.log == s2.log
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)

    def test_loss_decreases(self, corpus):
        inputs, _ = corpus
        _, state = train_base(tiny_config(steps=120, eval_every=40), inputs)
        early = np.mean([r["loss"] for r in state.log[:20]])
        late = np.mean([r["loss"] for r in state.log[-20:]])
        assert late < early


class TestPretrainAndFinetune:
    def _base_and_triplets(self, corpus):
        inputs, refs = corpus
        refset = ReferenceSet.from_images(refs)
        base, _ = train_base(tiny_config(steps=10), inputs)
        cache = build_cache(base, base, refset, dims=(64, 64))
        triplets = build_triplets(inputs, refset, "pretrain", base, base, cache=cache)
        return inputs, refset, base, triplets

    def test_pretrain_runs_and_logs(self, corpus):
        inputs, refset, base, triplets = self._base_and_triplets(corpus)
        model, state = pretrain_codec(tiny_config(steps=6), triplets, base, inputs, refset)
        assert model.is_trained
        assert len(state.log) == 6
        assert all(r["bpp_y"] > 0 for r in state.log)

    def test_ablated_pretrain_ignores_references(self, corpus):
        inputs, refset, base, triplets = self._base_and_triplets(corpus)
        cfg = tiny_config(steps=4, use_ref_entropy=False, use_ref_decoder=False)
        model, state = pretrain_codec(cfg, triplets, base, inputs, refset)
        assert not model.cfg.use_ref_entropy and not model.cfg.use_ref_decoder
        assert len(state.log) == 4

    def test_finetune_freezes_encoder_bits(self, corpus):
        inputs, refset, base, triplets = self._base_and_triplets(corpus)
        model, _ = pretrain_codec(tiny_config(steps=6), triplets, base, inputs, refset)
        theta_before = [p.detach().clone() for p in model.encoder_parameters()]
        phi_before = [p.detach().clone() for p in model.other_parameters()]
        model, state, rec_triplets = finetune_recycled(
            model, tiny_config(steps=6), inputs, refset, triplets
        )
        for before, after in zip(theta_before, model.encoder_parameters()):
            assert torch.equal(before, after)
        assert any(
            not torch.equal(b, a) for b, a in zip(phi_before, model.other_parameters())
        )
        assert all(t.stage == "recycled" for t in rec_triplets)

    def test_finetune_never_calls_pre_encoder(self, corpus):
        inputs, refset, base, triplets = self._base_and_triplets(corpus)
        model, _ = pretrain_codec(tiny_config(steps=4), triplets, base, inputs, refset)
        calls_before = base.encoder.calls
        finetune_recycled(model, tiny_config(steps=4), inputs, refset, triplets)
        assert base.encoder.calls == calls_before

    def test_finetune_improves_on_recycled_triplets(self, corpus):
        inputs, refset, base, triplets = self._base_and_triplets(corpus)
        model, _ = pretrain_codec(tiny_config(steps=40), triplets, base, inputs, refset)
        cache = build_cache(model, None, refset, dims=(64, 64))
        rec = build_triplets(
            inputs, refset, "recycled", model, None, cache=cache, pretrain_triplets=triplets
        )
        before = evaluate(model, inputs, refset, rec, 0.008)
        model, _, rec_after = finetune_recycled(
            model, tiny_config(steps=60), inputs, refset, triplets, cache=cache
        )
        after = evaluate(model, inputs, refset, rec_after, 0.008)
        assert after <= before


class TestLambdaSweep:
    def test_requires_two_lambdas(self, corpus):
        inputs, refs = corpus
        with pytest.raises(ContractError):
            lambda_sweep([tiny_config()], inputs, None, None, [])

    def test_output_sorted_and_bpp_ordered(self, corpus):
        inputs, refs = corpus
        refset = ReferenceSet.from_images(refs)
        base, _ = train_base(tiny_config(steps=10), inputs)
        cache = build_cache(base, base, refset, dims=(64, 64))
        triplets = build_triplets(inputs, refset, "pretrain", base, base, cache=cache)
        configs = [
            tiny_config(lmbda=0.012, steps=250, eval_every=50),
            tiny_config(lmbda=0.001, steps=250, eval_every=50),
        ]
        out = lambda_sweep(configs, inputs, refset, base, triplets)
        assert [l for l, _ in out] == [0.001, 0.012]
        assert len(out) == len(configs)
        assert all(m.lambda_index is not None for _, m in out)

        # bpp trend: the high-lambda model spends more bits on validation data
        bpps = []
        for lmbda, model in out:
            rec = build_triplets(
                inputs, refset, "pretrain", base, base,
                cache=build_cache(base, base, refset, dims=(64, 64)),
            )
            from refcodec.bitstream import encode_image

            total_bits = total_px = 0
            for t in rec[:3]:
                img = inputs[t.input_id]
                rmc = encode_image(model, img, (t.deep_id, t.shallow_id), refset)
                total_bits += rmc.payload_bits
                total_px += img.true_h * img.true_w
            bpps.append(total_bits / total_px)
        assert bpps[1] >= bpps[0]

"""Optimizer hand examples, training determinism, checkpoint round trips."""
import json

import numpy as np
import pytest

from himie.autodiff import NumericError, ParamTree
from himie.config import GenConfig, ModelConfig, OptimConfig, RunConfig
from himie.data import assign_modality_regime
from himie.model import init_params
from himie.synth import generate
from himie.trainer import (
    adam_step,
    group_lr,
    init_adam,
    load_checkpoint,
    save_checkpoint,
    save_step_log,
    train,
)

SMALL = ModelConfig(d_h=8, n_l=6, heads=2, n_p=4, d_in=3, d_vae=4, prompt_len=3,
                    vocab=64, max_len=64)


def small_run(**over) -> RunConfig:
    base = dict(
        model=SMALL,
        gen=GenConfig(docs=3, tokens_per_doc=(8, 12), frames_per_doc=(1, 2),
                      n_p=SMALL.n_p, d_in=SMALL.d_in, vocab=SMALL.vocab, seed=0),
        epochs=2, seed=0)
    base.update(over)
    return RunConfig(**base)


class TestAdam:
    def _one_param(self, value):
        p = ParamTree()
        p.add("w", np.array([value]))
        return p

    def test_first_step_hand_value(self):
        # m-hat/sqrt(v-hat) == g/|g| after bias correction, so the first
        # step moves by exactly lr (up to eps)
        p = self._one_param(1.0)
        state = init_adam(p)
        adam_step(p, {"w": np.array([1.0])}, state, OptimConfig(lr_other=1e-3))
        assert abs(p["w"].data[0] - 0.999) < 1e-6

    def test_zero_gradient_fixed_point(self):
        p = self._one_param(2.5)
        state = init_adam(p)
        adam_step(p, {"w": np.array([0.0])}, state, OptimConfig())
        assert p["w"].data[0] == 2.5
        assert not np.any(state.m["w"]) and not np.any(state.v["w"])

    def test_non_finite_gradient_rejected(self):
        p = self._one_param(1.0)
        state = init_adam(p)
        with pytest.raises(NumericError, match="non-finite gradient.*w"):
            adam_step(p, {"w": np.array([np.nan])}, state, OptimConfig())

    def test_frozen_params_excluded(self):
        p = ParamTree()
        p.add("w", np.ones(2))
        p.add("c", np.ones(2), trainable=False)
        state = init_adam(p)
        assert "c" not in state.m
        adam_step(p, {"w": np.ones(2)}, state, OptimConfig())
        assert np.array_equal(p["c"].data, np.ones(2))

    def test_group_assignment(self):
        optim = OptimConfig(lr_encoder=5e-6, lr_other=1e-3)
        assert group_lr("encoder.text.block0.attn.wq", optim) == 5e-6
        assert group_lr("encoder.frames.proj.w", optim) == 5e-6
        assert group_lr("heads.crf.emission", optim) == 1e-3
        assert group_lr("dffm.mix.g2x.base", optim) == 1e-3

    def test_zero_lr_rejected(self):
        from himie.config import ConfigError
        cfg = small_run(optim=OptimConfig(lr_encoder=0.0, lr_other=1e-3),
                        epochs=1)
        with pytest.raises(ConfigError, match="learning rates must be positive"):
            cfg.validate()

    def test_two_group_updates_differ(self):
        # run two adam steps manually with distinct group lrs
        p = ParamTree()
        p.add("encoder.w", np.array([1.0]))
        p.add("heads.w", np.array([1.0]))
        state = init_adam(p)
        optim = OptimConfig(lr_encoder=1e-4, lr_other=1e-2)
        adam_step(p, {"encoder.w": np.array([1.0]), "heads.w": np.array([1.0])},
                  state, optim)
        assert abs(p["encoder.w"].data[0] - (1 - 1e-4)) < 1e-7
        assert abs(p["heads.w"].data[0] - (1 - 1e-2)) < 1e-5


class TestTrain:
    def test_epochs_zero_returns_initialization(self):
        cfg = small_run(epochs=0)
        corpus = generate(cfg.gen)
        out = train(cfg, corpus)
        ref = init_params(cfg.model, cfg.seed)
        assert out.step == 0 and out.log == []
        for n in ref.names():
            assert np.array_equal(out.params[n].data, ref[n].data), n

    def test_bitwise_deterministic(self):
        cfg = small_run()
        corpus = generate(cfg.gen)
        corpus = assign_modality_regime(corpus, cfg.regime_fractions, cfg.seed)
        a = train(cfg, corpus)
        b = train(cfg, corpus)
        for n in a.params.names():
            assert np.array_equal(a.params[n].data, b.params[n].data), n
        assert [r.total for r in a.log] == [r.total for r in b.log]

    def test_step_count_and_log(self):
        cfg = small_run(epochs=2)
        corpus = generate(cfg.gen)
        out = train(cfg, corpus)
        assert out.step == 2 * len(corpus)
        assert len(out.log) == out.step
        assert all(np.isfinite(r.total) for r in out.log)
        assert {r.doc_id for r in out.log} == {d.id for d in corpus.documents}

    def test_loss_decreases_on_overfit(self):
        cfg = small_run(epochs=25)
        corpus = generate(cfg.gen)
        out = train(cfg, corpus)
        first = np.mean([r.total for r in out.log[:len(corpus)]])
        last = np.mean([r.total for r in out.log[-len(corpus):]])
        assert last < first * 0.5

    def test_non_finite_loss_aborts_with_step_info(self):
        cfg = small_run(epochs=1)
        corpus = generate(cfg.gen)
        params = init_params(cfg.model, cfg.seed)
        params["heads.crf.emission"].data[0, 0] = np.nan
        with pytest.raises(NumericError, match="non-finite loss at step 1"):
            train(cfg, corpus, params=params)

    def test_resume_from_given_params(self):
        cfg = small_run(epochs=1)
        corpus = generate(cfg.gen)
        first = train(cfg, corpus)
        resumed = train(cfg, corpus, params=first.params)
        assert resumed.step == len(corpus)  # counts only its own steps


class TestCheckpoint:
    def _ckpt(self, tmp_path, cfg=None, trained=False):
        cfg = cfg or small_run(epochs=1)
        corpus = generate(cfg.gen)
        if trained:
            out = train(cfg, corpus)
            params, step, rng = out.params, out.step, out.rng_state
        else:
            params, step, rng = init_params(cfg.model, cfg.seed), 0, None
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), params, cfg, step, rng)
        return path, params, cfg, step

    def test_round_trip_identity(self, tmp_path):
        path, params, cfg, step = self._ckpt(tmp_path, trained=True)
        loaded, cfg2, step2, rng2 = load_checkpoint(str(path))
        assert step2 == step and cfg2 == cfg
        assert loaded.names() == params.names()
        for n in params.names():
            assert np.array_equal(loaded[n].data, params[n].data), n
            assert loaded.is_trainable(n) == params.is_trainable(n)

    def test_save_load_save_bitwise_identical(self, tmp_path):
        path, params, cfg, step = self._ckpt(tmp_path, trained=True)
        loaded, cfg2, step2, rng2 = load_checkpoint(str(path))
        path2 = tmp_path / "again.ckpt"
        save_checkpoint(str(path2), loaded, cfg2, step2, rng2)
        assert path.read_bytes() == path2.read_bytes()

    def test_same_run_same_bytes(self, tmp_path):
        cfg = small_run(epochs=1)
        corpus = generate(cfg.gen)
        pa = tmp_path / "a.ckpt"
        pb = tmp_path / "b.ckpt"
        out_a = train(cfg, corpus)
        out_b = train(cfg, corpus)
        save_checkpoint(str(pa), out_a.params, cfg, out_a.step, out_a.rng_state)
        save_checkpoint(str(pb), out_b.params, cfg, out_b.step, out_b.rng_state)
        assert pa.read_bytes() == pb.read_bytes()

    def test_truncated_header_rejected(self, tmp_path):
        path, *_ = self._ckpt(tmp_path)
        data = path.read_bytes()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(data[:4])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(str(bad))

    def test_truncated_payload_rejected(self, tmp_path):
        path, *_ = self._ckpt(tmp_path)
        data = path.read_bytes()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated payload"):
            load_checkpoint(str(bad))

    def test_trailing_bytes_rejected(self, tmp_path):
        path, *_ = self._ckpt(tmp_path)
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(str(bad))

    def test_step_log_jsonl(self, tmp_path):
        cfg = small_run(epochs=1)
        out = train(cfg, generate(cfg.gen))
        path = tmp_path / "log.jsonl"
        save_step_log(str(path), out.log)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(rows) == out.step
        assert rows[0]["step"] == 1 and "total" in rows[0] and "ent" in rows[0]

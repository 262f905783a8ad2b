import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from conftest import (FD_RTOL, central_diff, max_rel_err, neural_spec, random_model, random_prompt,
                      random_response, tabular_spec)
from trajmerge.errors import FormatError, InputError
from trajmerge.policy import (EOS, Family, ModelSpec, PolicyCheckpoint, build_model, checkpoint_from_bytes,
                              checkpoint_to_bytes, grad_log_prob, load_checkpoint, log_prob,
                              next_token_probs, param_roundtrip, sample_response, sample_responses,
                              save_checkpoint)


class TestModelSpec:
    def test_tabular_zero_init(self):
        m = build_model(tabular_spec(V=4), "zeros", seed=99)
        assert m.params.shape == (16,)
        assert not m.params.any()
        assert m.iteration_index == 0

    def test_neural_param_count(self):
        m = build_model(neural_spec(V=4, k=2, d=3, h=5), "zeros")
        assert m.params.size == 12 + 35 + 24 == 71

    def test_seeded_normal_deterministic(self):
        a = build_model(tabular_spec(V=8), "seeded_normal", seed=7, stddev=0.1)
        b = build_model(tabular_spec(V=8), "seeded_normal", seed=7, stddev=0.1)
        assert a.params.tobytes() == b.params.tobytes()
        assert a.params.std() > 0

    @pytest.mark.parametrize("field,kwargs", [
        ("vocab_size", dict(vocab_size=1)),
        ("max_response_len", dict(max_response_len=0)),
        ("hidden_dim", dict(family="tiny_neural_lm", hidden_dim=0)),
    ])
    def test_invalid_spec_names_field(self, field, kwargs):
        with pytest.raises(ValidationError, match=field):
            ModelSpec(**kwargs)

    def test_tabular_ignores_neural_dims(self):
        spec = ModelSpec(family="tabular_bigram", vocab_size=3, context_window=4)
        assert (spec.context_window, spec.embed_dim, spec.hidden_dim) == (0, 0, 0)

    def test_checkpoint_rejects_bad_params(self):
        spec = tabular_spec(V=2)
        with pytest.raises(InputError):
            PolicyCheckpoint(spec, np.zeros(3))
        with pytest.raises(InputError):
            PolicyCheckpoint(spec, np.array([0.0, np.nan, 0.0, 0.0]))

    def test_checkpoint_params_immutable(self):
        m = build_model(tabular_spec(V=3), "zeros")
        with pytest.raises(ValueError):
            m.params[0] = 1.0


class TestLogProb:
    def test_uniform_tabular(self):
        m = build_model(tabular_spec(V=5), "zeros")
        assert log_prob(m, (3, 1), (2, 4, 1, EOS)) == pytest.approx(4 * math.log(1 / 5), abs=1e-12)

    def test_hand_softmax(self):
        spec = tabular_spec(V=3)
        params = np.zeros((3, 3))
        params[2] = [1.0, 0.0, 0.0]
        m = PolicyCheckpoint(spec, params.ravel())
        expected = math.log(math.e / (math.e + 2))
        assert expected == pytest.approx(-0.55144, abs=1e-5)
        assert log_prob(m, (2,), (EOS,)) == pytest.approx(expected, abs=1e-14)

    @pytest.mark.parametrize("spec", [tabular_spec(V=4), neural_spec(V=4)])
    def test_single_token_normalization(self, spec):
        # only EOS is a valid one-token response; the multi-token responses
        # starting with each content token carry the rest of the mass
        m = random_model(spec, 3)
        prompt = (1, 2)
        total = sum(math.exp(log_prob(m, prompt, (y, EOS))) / next_token_probs(m, prompt + (y,))[EOS]
                    for y in range(1, 4)) + math.exp(log_prob(m, prompt, (EOS,)))
        assert total == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("spec", [tabular_spec(V=6), neural_spec(V=6)])
    def test_next_token_probs_sum_to_one(self, spec, rng):
        m = random_model(spec, 11, stddev=2.0)
        for _ in range(20):
            p = next_token_probs(m, random_prompt(rng, 6, max_len=5))
            assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_log_prob_nonpositive(self, rng):
        m = random_model(neural_spec(V=6), 4)
        for _ in range(20):
            assert log_prob(m, random_prompt(rng, 6), random_response(rng, 6, 6)) <= 0.0

    def test_tabular_row_shift_invariance(self, rng):
        spec = tabular_spec(V=5)
        m = random_model(spec, 8)
        shifted = m.params.reshape(5, 5).copy()
        shifted[3] += 2.75
        m2 = PolicyCheckpoint(spec, shifted.ravel())
        for _ in range(20):
            x, y = random_prompt(rng, 5), random_response(rng, 5, 6)
            assert log_prob(m, x, y) == pytest.approx(log_prob(m2, x, y), abs=1e-12)

    def test_context_left_padding(self):
        # an empty prompt conditions the first token on EOS
        spec = tabular_spec(V=3)
        params = np.zeros((3, 3))
        params[EOS] = [0.0, 2.0, 0.0]
        m = PolicyCheckpoint(spec, params.ravel())
        assert log_prob(m, (), (1, EOS)) == pytest.approx(
            math.log(math.exp(2) / (math.exp(2) + 2)) + math.log(1 / 3), abs=1e-12)

    @pytest.mark.parametrize("prompt,response", [
        ((1,), (5, EOS)),
        ((1,), (2,)),
        ((1,), (EOS, 2, EOS)),
        ((0,), (EOS,)),
        ((1,), ()),
    ])
    def test_invalid_sequences(self, prompt, response):
        with pytest.raises(InputError):
            log_prob(build_model(tabular_spec(V=5), "zeros"), prompt, response)


class TestGradLogProb:
    @pytest.mark.parametrize("family", ["tabular", "neural"])
    def test_finite_differences(self, family, rng):
        for trial in range(10):
            V = int(rng.integers(2, 7))
            spec = tabular_spec(V=V) if family == "tabular" else neural_spec(V=V, k=int(rng.integers(1, 4)))
            m = random_model(spec, 100 + trial)
            x, y = random_prompt(rng, V), random_response(rng, V, 6)
            fd = central_diff(lambda p: log_prob(m.replace(params=p), x, y), m.params)
            assert max_rel_err(grad_log_prob(m, x, y), fd) <= FD_RTOL

    def test_unused_rows_zero(self):
        m = random_model(tabular_spec(V=6), 5)
        g = grad_log_prob(m, (2,), (3, EOS)).reshape(6, 6)
        for row in (0, 1, 4, 5):
            assert not g[row].any()

    def test_softmax_rows_sum_to_zero(self):
        m = random_model(tabular_spec(V=6), 5)
        g = grad_log_prob(m, (4,), (EOS,)).reshape(6, 6)
        assert abs(g[4].sum()) <= 1e-12


class TestSampling:
    def test_greedy_uniform_emits_eos(self):
        m = build_model(tabular_spec(V=5), "zeros")
        assert sample_response(m, (1, 2), temperature=0.0) == (EOS,)

    def test_same_seed_same_response(self):
        m = random_model(neural_spec(V=8, max_len=8), 2)
        a = sample_response(m, (1, 2, 3), temperature=1.0, rng_seed=42)
        b = sample_response(m, (1, 2, 3), temperature=1.0, rng_seed=42)
        assert a == b

    def test_greedy_pure_function_of_params(self):
        m = random_model(neural_spec(V=8, max_len=8), 2, stddev=2.0)
        seeds = {sample_response(m, (3, 4), temperature=0.0, rng_seed=s) for s in range(5)}
        assert len(seeds) == 1

    def test_response_invariants(self, rng):
        spec = neural_spec(V=4, max_len=5)
        m = random_model(spec, 9, stddev=0.1)
        prompts = [random_prompt(rng, 4) for _ in range(200)]
        for r in sample_responses(m, prompts, 1.0, None, list(range(200))):
            assert 1 <= len(r) <= 5
            assert r[-1] == EOS and EOS not in r[:-1]

    def test_truncation_appends_eos(self):
        spec = tabular_spec(V=3, max_len=4)
        params = np.zeros((3, 3))
        params[:, 1] = 50.0  # token 1 always
        m = PolicyCheckpoint(spec, params.ravel())
        assert sample_response(m, (2,), temperature=0.0) == (1, 1, 1, EOS)
        assert sample_response(m, (2,), temperature=0.0, max_len=1) == (EOS,)

    def test_max_len_zero_rejected(self):
        with pytest.raises(InputError):
            sample_response(build_model(tabular_spec(), "zeros"), (1,), max_len=0)

    def test_first_token_frequencies(self):
        # binomial tail oracle: each of 3 tokens within 4 sigma of n/3
        m = build_model(tabular_spec(V=3, max_len=2), "zeros")
        n = 10000
        first = [r[0] for r in sample_responses(m, [(1,)] * n, 1.0, None, list(range(n)))]
        counts = np.bincount(first, minlength=3)
        sigma = math.sqrt(n * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - n / 3) <= 4 * sigma)


class TestCheckpointFile:
    @pytest.mark.parametrize("spec", [tabular_spec(V=4), neural_spec(V=5)])
    def test_roundtrip_bitwise(self, spec, tmp_path):
        m = random_model(spec, 21).replace(iteration_index=3)
        assert param_roundtrip(m).identical_to(m)
        save_checkpoint(m, tmp_path / "a.ckpt")
        assert load_checkpoint(tmp_path / "a.ckpt").identical_to(m)

    def test_header_layout(self):
        m = build_model(neural_spec(V=4, k=2, d=3, h=5, max_len=7), "zeros").replace(iteration_index=2)
        blob = checkpoint_to_bytes(m)
        assert blob[:4] == b"TPMM"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert blob[8] == 1
        dims = [int.from_bytes(blob[9 + 4 * i:13 + 4 * i], "little") for i in range(6)]
        assert dims == [4, 2, 3, 5, 7, 2]
        assert int.from_bytes(blob[33:41], "little") == 71
        assert len(blob) == 41 + 8 * 71

    def test_tabular_writes_zero_dims(self):
        blob = checkpoint_to_bytes(build_model(tabular_spec(V=3), "zeros"))
        assert blob[8] == 0
        assert blob[13:25] == bytes(12)

    def test_truncated_payload(self):
        blob = checkpoint_to_bytes(random_model(tabular_spec(V=4), 1))
        with pytest.raises(FormatError):
            checkpoint_from_bytes(blob[:-5])

    def test_bad_magic(self):
        blob = checkpoint_to_bytes(random_model(tabular_spec(V=4), 1))
        with pytest.raises(FormatError, match="magic"):
            checkpoint_from_bytes(b"XXXX" + blob[4:])

    def test_param_count_mismatch(self):
        blob = bytearray(checkpoint_to_bytes(random_model(tabular_spec(V=4), 1)))
        blob[33:41] = (17).to_bytes(8, "little")
        with pytest.raises(FormatError, match="param_count"):
            checkpoint_from_bytes(bytes(blob))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), temp=st.sampled_from([0.0, 0.5, 1.0, 2.0]))
def test_sampling_is_deterministic(seed, temp):
    m = random_model(neural_spec(V=6, max_len=6), seed % 1000)
    prompts = [(1, 2), (3,), (5, 4, 3)]
    seeds = [seed, seed + 1, seed + 2]
    assert sample_responses(m, prompts, temp, None, seeds) == sample_responses(m, prompts, temp, None, seeds)

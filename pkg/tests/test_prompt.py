import numpy as np
import pytest

from bevlift.params import ParameterStore
from bevlift.prompt import (FullPrompt, PromptFactors, apply_prompt,
                            materialize_factors, prompt_param_count)
from bevlift.tensor import Tensor


def factors(rank, c, h, w, rng):
    return (rng.standard_normal((rank, c)).astype(np.float32),
            rng.standard_normal((rank, h)).astype(np.float32),
            rng.standard_normal((rank, w)).astype(np.float32))


class TestMaterialize:
    def test_rank1_scalar_product(self):
        a = Tensor(np.array([[2.0]], dtype=np.float32))
        b = Tensor(np.array([[3.0]], dtype=np.float32))
        d = Tensor(np.array([[5.0]], dtype=np.float32))
        assert materialize_factors(a, b, d).data.item() == pytest.approx(30.0)

    def test_matches_einsum_oracle(self, rng):
        a, b, d = factors(3, 4, 6, 8, rng)
        p = materialize_factors(Tensor(a), Tensor(b), Tensor(d)).data
        expect = np.zeros((4, 6, 8))
        for r in range(3):
            expect += np.einsum("c,h,w->chw", a[r].astype(np.float64),
                                b[r].astype(np.float64), d[r].astype(np.float64))
        assert p == pytest.approx(expect, abs=1e-4)
        assert p.shape == (4, 6, 8)

    def test_rank_constructed_exactness(self, rng):
        # a tensor built as a rank-3 sum is reproduced with MSE < 1e-6
        a, b, d = factors(3, 4, 8, 8, rng)
        target = np.einsum("rc,rh,rw->chw", a, b, d)
        store = ParameterStore()
        pf = PromptFactors(store, "mX", 4, 8, 8, rank=3)
        pf.set_factors(a, b, d)
        mse = float(((pf.materialize().data - target) ** 2).mean())
        assert mse < 1e-6

    def test_additivity_via_factor_concat(self, rng):
        # rank-(R1+R2) with concatenated factors = sum of the two prompts
        a1, b1, d1 = factors(2, 3, 5, 7, rng)
        a2, b2, d2 = factors(3, 3, 5, 7, rng)
        p1 = materialize_factors(Tensor(a1), Tensor(b1), Tensor(d1)).data
        p2 = materialize_factors(Tensor(a2), Tensor(b2), Tensor(d2)).data
        pc = materialize_factors(Tensor(np.concatenate([a1, a2])),
                                 Tensor(np.concatenate([b1, b2])),
                                 Tensor(np.concatenate([d1, d2]))).data
        assert pc == pytest.approx(p1 + p2, abs=1e-5)

    def test_gradients_flow_to_all_factors(self, rng):
        a, b, d = factors(2, 3, 4, 5, rng)
        ta, tb, td = (Tensor(x, requires_grad=True) for x in (a, b, d))
        materialize_factors(ta, tb, td).sum().backward()
        for x in (ta, tb, td):
            assert x.grad is not None and np.any(x.grad != 0)


class TestPromptFactors:
    def test_param_count_formula(self):
        store = ParameterStore()
        pf = PromptFactors(store, "mX", 12, 32, 64, rank=8)
        assert pf.param_count() == 8 * (12 + 32 + 64)
        assert sum(p.data.size for p in store) == pf.param_count()

    def test_registered_names(self):
        store = ParameterStore()
        PromptFactors(store, "m9", 4, 8, 8, rank=2)
        assert set(store.names()) == {"lift.m9.A", "lift.m9.B", "lift.m9.D"}

    def test_bad_rank_rejected(self):
        with pytest.raises(ValueError):
            PromptFactors(ParameterStore(), "mX", 4, 8, 8, rank=0)

    def test_oversized_rank_warns(self):
        with pytest.warns(UserWarning):
            PromptFactors(ParameterStore(), "mX", 4, 8, 8, rank=16)

    def test_full_prompt_count(self):
        store = ParameterStore()
        fp = FullPrompt(store, "mX", 4, 8, 8)
        assert fp.param_count() == 4 * 8 * 8


class TestApply:
    def test_additive(self, rng):
        store = ParameterStore()
        pf = PromptFactors(store, "mX", 3, 4, 4, rank=2)
        f = Tensor(rng.standard_normal((3, 4, 4)).astype(np.float32))
        out = apply_prompt(f, pf)
        assert out.data == pytest.approx(f.data + pf.materialize().data,
                                         abs=1e-6)

    def test_raw_tensor_prompt(self, rng):
        f = Tensor(np.zeros((2, 3, 3), dtype=np.float32))
        p = Tensor(rng.standard_normal((2, 3, 3)).astype(np.float32))
        assert np.array_equal(apply_prompt(f, p).data, p.data)

    def test_shape_mismatch_raises(self):
        store = ParameterStore()
        pf = PromptFactors(store, "mX", 3, 4, 4, rank=2)
        with pytest.raises(ValueError):
            apply_prompt(Tensor(np.zeros((3, 8, 8), dtype=np.float32)), pf)


class TestParamCountFunction:
    def test_published_architecture_numbers(self):
        assert prompt_param_count(64, 128, 256, 8) == 3584
        assert prompt_param_count(64, 128, 256, 8, low_rank=False) == 2_097_152

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            prompt_param_count(0, 8, 8, 2)

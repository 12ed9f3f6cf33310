"""Delta merging: even averages, coefficient math, and the tuning loop."""

from __future__ import annotations

import json

import pytest
import torch
import torch.nn.functional as F

from hyperlora.attacks import AttackBudget
from hyperlora.backbone import InjectionSite
from hyperlora.errors import ConfigurationError, NumericalError
from hyperlora.merging import (
    MergeCoefficients,
    combine_deltas,
    even_coefficients,
    load_coefficients,
    merge_equal,
    merge_surrogate,
    merged_forward,
    optimize_coefficients,
    save_coefficients,
)

METHODS = ("vanilla_at", "trades", "mart", "dkl")


def site(layer: int, position: str = "attn_qkv", in_dim: int = 2, out_dim: int = 2):
    return InjectionSite(layer, position, in_dim, out_dim)


def random_specialists(model, methods=METHODS, scale=0.01, seed=0):
    g = torch.Generator().manual_seed(seed)
    out = {}
    for m in methods:
        out[m] = {
            s: scale * torch.randn(s.out_dim, s.in_dim, generator=g)
            for s in model.sites
        }
    return out


class TestCoefficients:
    def test_even_values_exact(self):
        coeffs = even_coefficients(METHODS, num_layers=3)
        assert coeffs.lam.shape == (4, 3)
        assert torch.equal(coeffs.lam, torch.full((4, 3), 0.25))
        assert coeffs.tradeoff_kl == 1.0

    def test_even_single_method(self):
        coeffs = even_coefficients(("trades",), num_layers=2)
        assert torch.equal(coeffs.lam, torch.ones(1, 2))

    @pytest.mark.parametrize("methods,layers", [((), 1), (METHODS, 0)])
    def test_even_rejects_empty(self, methods, layers):
        with pytest.raises(ConfigurationError):
            even_coefficients(methods, layers)

    def test_shape_validation(self):
        with pytest.raises(ConfigurationError):
            MergeCoefficients(METHODS, torch.ones(3, 2))
        with pytest.raises(ConfigurationError):
            MergeCoefficients(METHODS, torch.ones(4))

    def test_non_finite_rejected(self):
        lam = torch.ones(4, 2)
        lam[1, 1] = float("inf")
        with pytest.raises(NumericalError):
            MergeCoefficients(METHODS, lam)

    def test_row_lookup(self):
        coeffs = even_coefficients(METHODS, 1)
        assert coeffs.row("mart") == 2
        with pytest.raises(ConfigurationError):
            coeffs.row("unknown")


class TestCombine:
    def test_two_method_hand_average(self):
        s = site(0)
        specialists = {
            "a": {s: torch.tensor([[2.0, 0.0], [0.0, 0.0]])},
            "b": {s: torch.tensor([[0.0, 2.0], [0.0, 0.0]])},
        }
        merged = merge_equal(specialists).deltas
        assert torch.equal(merged[s], torch.tensor([[1.0, 1.0], [0.0, 0.0]]))

    def test_opposite_deltas_cancel(self):
        s = site(0)
        d = torch.tensor([[3.0, -1.0], [0.5, 2.0]])
        merged = merge_equal({"a": {s: d}, "b": {s: -d}}).deltas
        assert torch.equal(merged[s], torch.zeros(2, 2))

    def test_mean_of_identical_integer_deltas(self):
        # Small integer entries make every quarter and partial sum exactly
        # representable, so the four-way mean must reproduce the input.
        s = site(1, "mlp_fc2")
        d = torch.tensor([[4.0, -8.0], [0.0, 2.0]])
        specialists = {m: {s: d.clone()} for m in METHODS}
        merged = merge_equal(specialists).deltas
        assert torch.equal(merged[s], d)

    def test_mean_of_identical_random_deltas_close(self):
        s = site(0, "mlp_fc1")
        g = torch.Generator().manual_seed(5)
        d = torch.randn(2, 2, generator=g)
        merged = merge_equal({m: {s: d.clone()} for m in METHODS}).deltas
        assert torch.allclose(merged[s], d, atol=1e-6, rtol=0)

    def test_site_mismatch_rejected(self):
        sa, sb = site(0), site(1)
        with pytest.raises(ConfigurationError, match="different sites"):
            merge_equal({"a": {sa: torch.zeros(2, 2)}, "b": {sb: torch.zeros(2, 2)}})

    def test_empty_specialists_rejected(self):
        with pytest.raises(ConfigurationError):
            merge_equal({})

    def test_missing_method_weight_rejected(self):
        s = site(0)
        coeffs = even_coefficients(("a",), 1)
        with pytest.raises(ConfigurationError, match="no mixing weights"):
            combine_deltas({"a": {s: torch.zeros(2, 2)}, "b": {s: torch.zeros(2, 2)}}, coeffs)

    def test_layer_outside_table_rejected(self):
        s = site(3)
        coeffs = even_coefficients(("a",), num_layers=2)
        with pytest.raises(ConfigurationError, match="outside coefficient table"):
            combine_deltas({"a": {s: torch.zeros(2, 2)}}, coeffs)

    def test_single_method_unit_weight_is_identity(self):
        s = site(0)
        g = torch.Generator().manual_seed(9)
        d = torch.randn(2, 2, generator=g)
        merged = merge_equal({"solo": {s: d}}).deltas
        assert torch.equal(merged[s], d)

    def test_doubling_weights_doubles_delta(self):
        s0, s1 = site(0), site(1, "mlp_fc2")
        g = torch.Generator().manual_seed(11)
        specialists = {
            m: {s: torch.randn(2, 2, generator=g) for s in (s0, s1)} for m in METHODS
        }
        lam = torch.rand(4, 2, generator=g)
        once = combine_deltas(specialists, MergeCoefficients(METHODS, lam))
        twice = combine_deltas(specialists, MergeCoefficients(METHODS, 2 * lam))
        for s in (s0, s1):
            assert torch.equal(twice[s], 2 * once[s])


class TestMergedModel:
    def test_zero_weights_match_base_model(self, small_model, toy_batch):
        x, _ = toy_batch
        specialists = random_specialists(small_model)
        coeffs = MergeCoefficients(METHODS, torch.zeros(4, 2))
        merged = combine_deltas(specialists, coeffs)
        with torch.no_grad():
            assert torch.equal(small_model(x, merged), small_model(x))

    def test_even_weights_match_merge_equal(self, small_model, toy_batch):
        x, _ = toy_batch
        specialists = random_specialists(small_model)
        coeffs = even_coefficients(METHODS, num_layers=2)
        with torch.no_grad():
            via_forward = merged_forward(small_model, specialists, coeffs, x)
            via_equal = small_model(x, merge_equal(specialists).deltas)
        assert torch.equal(via_forward, via_equal)

    def test_surrogate_without_kl_is_clean_loss(self, small_model, toy_batch):
        x, y = toy_batch
        specialists = random_specialists(small_model)
        coeffs = even_coefficients(METHODS, 2, tradeoff_kl=0.0)
        deltas = combine_deltas(specialists, coeffs)
        value = merge_surrogate(small_model, specialists, coeffs, x, x + 0.01, y)
        expected = F.cross_entropy(small_model(x, deltas), y)
        assert torch.allclose(value, expected, atol=1e-7, rtol=0)

    def test_surrogate_self_attack_is_clean_loss(self, small_model, toy_batch):
        x, y = toy_batch
        specialists = random_specialists(small_model)
        coeffs = even_coefficients(METHODS, 2, tradeoff_kl=3.0)
        deltas = combine_deltas(specialists, coeffs)
        value = merge_surrogate(small_model, specialists, coeffs, x, x, y)
        expected = F.cross_entropy(small_model(x, deltas), y)
        assert torch.allclose(value, expected, atol=1e-6, rtol=0)


BUDGET = AttackBudget(0.1, 0.05, iterations=2)


class TestOptimize:
    def test_zero_iterations_untouched(self, small_model, toy_batch):
        x, y = toy_batch
        specialists = random_specialists(small_model)
        coeffs = even_coefficients(METHODS, 2)
        tuned, history = optimize_coefficients(
            small_model, specialists, coeffs, x, y, BUDGET, iterations=0
        )
        assert history == []
        assert tuned is coeffs

    def test_negative_iterations_rejected(self, small_model, toy_batch):
        x, y = toy_batch
        with pytest.raises(ConfigurationError):
            optimize_coefficients(
                small_model,
                random_specialists(small_model),
                even_coefficients(METHODS, 2),
                x,
                y,
                BUDGET,
                iterations=-1,
            )

    def test_zero_lr_keeps_weights(self, small_model, toy_batch):
        x, y = toy_batch
        specialists = random_specialists(small_model)
        coeffs = even_coefficients(METHODS, 2)
        tuned, history = optimize_coefficients(
            small_model, specialists, coeffs, x, y, BUDGET, iterations=3, lr=0.0
        )
        assert torch.equal(tuned.lam, coeffs.lam)
        assert len(history) == 4

    def test_seven_rounds_reduce_surrogate(self, small_model, toy_batch):
        x, y = toy_batch
        specialists = random_specialists(small_model, scale=0.05, seed=2)
        coeffs = even_coefficients(METHODS, 2)
        tuned, history = optimize_coefficients(
            small_model, specialists, coeffs, x, y, BUDGET, iterations=7, lr=1e-2
        )
        assert len(history) == 8
        assert history[-1] < history[0]
        assert not torch.equal(tuned.lam, coeffs.lam)

    def test_only_weights_move(self, small_model, toy_batch):
        x, y = toy_batch
        specialists = random_specialists(small_model)
        model_before = {
            k: v.detach().clone() for k, v in small_model.state_dict().items()
        }
        spec_before = {
            m: {s: d.clone() for s, d in dm.items()} for m, dm in specialists.items()
        }
        optimize_coefficients(
            small_model,
            specialists,
            even_coefficients(METHODS, 2),
            x,
            y,
            BUDGET,
            iterations=2,
        )
        for k, v in small_model.state_dict().items():
            assert torch.equal(v, model_before[k]), k
        for m in specialists:
            for s in specialists[m]:
                assert torch.equal(specialists[m][s], spec_before[m][s])

    def test_poisoned_specialist_raises(self, small_model, toy_batch):
        # A NaN delta is caught by whichever numeric guard sees it first
        # (the attack's gradient check fires before the surrogate's).
        x, y = toy_batch
        specialists = random_specialists(small_model)
        first = next(iter(specialists))
        poisoned_site = next(iter(specialists[first]))
        specialists[first][poisoned_site] = specialists[first][poisoned_site].clone()
        specialists[first][poisoned_site][0, 0] = float("nan")
        with pytest.raises(NumericalError):
            optimize_coefficients(
                small_model,
                specialists,
                even_coefficients(METHODS, 2),
                x,
                y,
                BUDGET,
                iterations=2,
            )

    def test_non_finite_surrogate_names_round(self, small_model, toy_batch, monkeypatch):
        x, y = toy_batch
        monkeypatch.setattr(
            "hyperlora.merging.merge_surrogate",
            lambda *a, **k: torch.tensor(float("nan")),
        )
        with pytest.raises(NumericalError, match="at round 0"):
            optimize_coefficients(
                small_model,
                random_specialists(small_model),
                even_coefficients(METHODS, 2),
                x,
                y,
                BUDGET,
                iterations=2,
            )


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        g = torch.Generator().manual_seed(4)
        coeffs = MergeCoefficients(METHODS, torch.rand(4, 3, generator=g), 2.5)
        path = tmp_path / "coeffs.json"
        save_coefficients(coeffs, path)
        loaded = load_coefficients(path)
        assert loaded.methods == coeffs.methods
        assert torch.equal(loaded.lam, coeffs.lam)
        assert loaded.tradeoff_kl == 2.5

    def test_file_is_plain_json(self, tmp_path):
        coeffs = even_coefficients(("a", "b"), 2)
        path = tmp_path / "coeffs.json"
        save_coefficients(coeffs, path)
        doc = json.loads(path.read_text())
        assert doc["methods"] == ["a", "b"]
        assert len(doc["entries"]) == 4

    @pytest.mark.parametrize("payload", ["not json at all", '{"methods": ["a"]}'])
    def test_malformed_rejected(self, tmp_path, payload):
        path = tmp_path / "bad.json"
        path.write_text(payload)
        with pytest.raises(ConfigurationError):
            load_coefficients(path)

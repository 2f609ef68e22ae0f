"""Tests for run configuration parsing, validation, and the preset."""

import pytest

from routedattn.config import ConfigError, RunConfig, apply_preset


def base_dict(**overrides):
    data = {"nQ": 64, "nK": 96, "d": 8, "cQ": 4, "cK": 6}
    data.update(overrides)
    return data


class TestFromDict:
    def test_minimal_config_gets_defaults(self):
        cfg = RunConfig.from_dict(base_dict())
        assert cfg.budget_mode == "globalDensity"
        assert cfg.rho == 0.25
        assert cfg.estimator_mode == "valueAware"
        assert cfg.policy == "errorAwareCompensated"
        assert cfg.seeds == (0,)
        assert cfg.precision == "double"
        assert cfg.kmeans_restarts == 1
        assert (cfg.q_blobs, cfg.k_blobs) == (4, 4)
        assert cfg.sigma == 0.1

    def test_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown config keys: flavour"):
            RunConfig.from_dict(base_dict(flavour="spicy"))

    def test_rejects_missing_required(self):
        data = base_dict()
        del data["cK"], data["d"]
        with pytest.raises(ConfigError, match="missing required config keys: d, cK"):
            RunConfig.from_dict(data)

    def test_rejects_non_object(self):
        with pytest.raises(ConfigError, match="JSON object"):
            RunConfig.from_dict([1, 2, 3])

    def test_seeds_list_becomes_tuple(self):
        cfg = RunConfig.from_dict(base_dict(seeds=[3, 1, 4]))
        assert cfg.seeds == (3, 1, 4)
        with pytest.raises(ConfigError, match="seeds"):
            RunConfig.from_dict(base_dict(seeds=7))


class TestValidation:
    @pytest.mark.parametrize("key,value", [
        ("nQ", 0), ("nK", -2), ("d", 1.5), ("cQ", True), ("cK", "six"),
        ("kmeansRestarts", 0), ("qBlobs", 0), ("kBlobs", -1),
    ])
    def test_count_fields_must_be_positive_integers(self, key, value):
        with pytest.raises(ConfigError, match="integer >= 1"):
            RunConfig.from_dict(base_dict(**{key: value}))

    def test_cluster_counts_cannot_exceed_token_counts(self):
        with pytest.raises(ConfigError, match="cQ"):
            RunConfig.from_dict(base_dict(cQ=65))
        with pytest.raises(ConfigError, match="cK"):
            RunConfig.from_dict(base_dict(cK=97))

    def test_budget_mode_and_knobs(self):
        with pytest.raises(ConfigError, match="budgetMode"):
            RunConfig.from_dict(base_dict(budgetMode="entryBudget"))
        with pytest.raises(ConfigError, match="rho"):
            RunConfig.from_dict(base_dict(rho=1.5))
        with pytest.raises(ConfigError, match="rho"):
            RunConfig.from_dict(base_dict(rho=None))
        with pytest.raises(ConfigError, match="p"):
            RunConfig.from_dict(base_dict(budgetMode="perClusterTopP"))
        with pytest.raises(ConfigError, match="p"):
            RunConfig.from_dict(base_dict(budgetMode="perClusterTopP", p=0.0))
        cfg = RunConfig.from_dict(base_dict(budgetMode="perClusterTopP", p=0.85))
        assert cfg.p == 0.85

    def test_global_only_policies_rejected_under_top_p(self):
        for policy in ("random", "oracleKnapsack"):
            with pytest.raises(ConfigError, match="globalDensity"):
                RunConfig.from_dict(
                    base_dict(budgetMode="perClusterTopP", p=0.5, policy=policy)
                )
        cfg = RunConfig.from_dict(base_dict(policy="oracleKnapsack"))
        assert cfg.policy == "oracleKnapsack"

    def test_enumerated_fields(self):
        with pytest.raises(ConfigError, match="estimatorMode"):
            RunConfig.from_dict(base_dict(estimatorMode="psychic"))
        with pytest.raises(ConfigError, match="policy"):
            RunConfig.from_dict(base_dict(policy="bestEffort"))
        with pytest.raises(ConfigError, match="precision"):
            RunConfig.from_dict(base_dict(precision="half"))

    def test_seed_and_sigma_validation(self):
        with pytest.raises(ConfigError, match="non-empty"):
            RunConfig.from_dict(base_dict(seeds=[]))
        with pytest.raises(ConfigError, match="integers"):
            RunConfig.from_dict(base_dict(seeds=[0, 1.5]))
        with pytest.raises(ConfigError, match="sigma"):
            RunConfig.from_dict(base_dict(sigma=0.0))


class TestRoundTrip:
    def test_to_dict_uses_json_keys(self):
        cfg = RunConfig.from_dict(base_dict(seeds=[1, 2], centerScale=2.0))
        data = cfg.to_dict()
        assert data["nQ"] == 64
        assert data["seeds"] == [1, 2]
        assert data["centerScale"] == 2.0
        assert RunConfig.from_dict(data) == cfg


class TestPreset:
    def test_paper_preset_pins_main_configuration(self):
        cfg = apply_preset(RunConfig.from_dict(base_dict(nQ=256, nK=512, d=16)), "paper")
        assert cfg.budget_mode == "perClusterTopP"
        assert cfg.p == 0.85
        assert cfg.rho is None
        assert cfg.estimator_mode == "valueAware"
        assert cfg.policy == "errorAwareCompensated"
        assert cfg.c_q == max(4, 256 // 12)
        assert cfg.c_k == max(8, round(512 / 3.6))

    def test_preset_clamps_to_tiny_instances(self):
        cfg = apply_preset(RunConfig.from_dict({"nQ": 3, "nK": 5, "d": 4, "cQ": 1, "cK": 1}), "paper")
        assert cfg.c_q == 3
        assert cfg.c_k == 5

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            apply_preset(RunConfig.from_dict(base_dict()), "journal")

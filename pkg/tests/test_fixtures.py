import numpy as np
import pytest

from algorithms.policy import TeamPolicyTuple, WideSensePolicy
from inference.cost_eval import check_cost
from models.fixtures import FIXTURE_BUILDERS, build_team_decoupled, build_tanh_drift, feedback_policy
from services.fixture_registry import FixtureRegistry
from utils.errors import ValidationError


@pytest.mark.parametrize("name", sorted(FIXTURE_BUILDERS))
def test_every_fixture_builds(name):
    fx = FIXTURE_BUILDERS[name]()
    assert fx.name == name
    policies = fx.reference_policies()
    assert len(policies) == 3
    if fx.structure in ("team_local", "team_coupled"):
        assert all(isinstance(p, TeamPolicyTuple) and p.n_agents == fx.n_agents for p in policies)
    assert check_cost(fx.cost, len(fx.x0), fx.action_grid.box)["passed"]


def test_unknown_parameter_rejected():
    with pytest.raises(ValidationError):
        build_tanh_drift(volatility=2.0)


def test_overrides_reach_the_grid():
    fx = build_tanh_drift(macro_steps=4, inner_refine=2)
    assert fx.time_grid.macro_steps == 4 and fx.time_grid.n_inner == 8
    assert fx.params["macro_steps"] == 4


def test_decoupled_fixture_has_no_coupling():
    fx = build_team_decoupled()
    assert fx.model.coupling_bound == 0.0
    assert len(fx.solo_costs) == 2


def test_feedback_policy_rotates_actions():
    template = build_tanh_drift(macro_steps=2, cells=3, levels=3).templates()[0]
    policy = feedback_policy(template)
    assert policy.is_deterministic()
    assert np.argmax(policy.tables[1], axis=1).tolist() == [1, 2, 0]


def test_observed_templates_are_wide_sense():
    fx = FIXTURE_BUILDERS["pomdp_informative"]()
    assert isinstance(fx.templates()[0], WideSensePolicy)


def test_registry_caches_by_overrides(registry):
    a = registry.resolve("tanh_drift", {"macro_steps": 4})
    assert registry.resolve("tanh_drift", {"macro_steps": 4}) is a
    assert registry.resolve("tanh_drift") is not a
    with pytest.raises(ValidationError):
        registry.resolve("no_such_fixture")


def test_registry_register_clears_cache():
    registry = FixtureRegistry()
    first = registry.resolve("tanh_drift")
    registry.register("tanh_drift", lambda **kw: build_tanh_drift(macro_steps=2, **kw))
    second = registry.resolve("tanh_drift")
    assert second is not first
    assert second.time_grid.macro_steps == 2
    assert "tanh_drift" in registry.available()

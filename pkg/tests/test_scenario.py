import numpy as np
import pytest

from cfx.dataset import DEFAULT_SCHEMA
from cfx.errors import ContractError
from cfx.scenario import Scenario


def test_parse_aliases_and_names():
    s = Scenario.parse(["weather=0", "Lighting condition=3"], DEFAULT_SCHEMA)
    assert s.deltas == (("Lighting condition", 3), ("Weather condition", 0))
    assert s.label(DEFAULT_SCHEMA) == "lighting=3;weather=0"
    assert Scenario.parse("lighting=3,weather=0", DEFAULT_SCHEMA) == s


def test_identity():
    s = Scenario.parse("identity", DEFAULT_SCHEMA)
    assert s.is_identity and s.label() == "identity"
    t = np.array([[1, 2, 0, 1, 0, 0, 1, 0]])
    assert np.array_equal(s.apply(t, DEFAULT_SCHEMA), t)


def test_out_of_range_level_message():
    with pytest.raises(ContractError, match="lighting level 9 outside valid range 0-3"):
        Scenario.parse("lighting=9", DEFAULT_SCHEMA)


@pytest.mark.parametrize("bad", ["lighting", "lighting=x", "severity=1", "nothing=1"])
def test_bad_items(bad):
    with pytest.raises(ContractError):
        Scenario.parse(bad, DEFAULT_SCHEMA)


def test_duplicate_variable_rejected():
    with pytest.raises(ContractError):
        Scenario.parse(["lighting=1", "lighting=2"], DEFAULT_SCHEMA)


def test_apply_sets_levels_and_copies():
    t = np.zeros((3, 8), dtype=np.int64)
    out = Scenario.parse("pedestrian=1", DEFAULT_SCHEMA).apply(t, DEFAULT_SCHEMA)
    assert out[:, 5].tolist() == [1, 1, 1] and t.sum() == 0

"""Every scripted scenario passes, and failures say why."""
import pytest

from zephyr.scenarios import SCENARIOS, marked_position_counts, run_scenario


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_scenario_passes(name):
    result = run_scenario(name, seed=42)
    assert result.passed, result.summary() + "\n" + "\n".join(result.trace)
    assert result.summary().startswith(f"scenario {name}: PASS")


def test_unknown_scenario():
    with pytest.raises(ValueError, match="dos-routing"):
        run_scenario("meteor")


def test_marked_positions_are_counted_once_per_batch():
    counts = marked_position_counts(5, 500, seed=1)
    assert len(counts) == 5 and sum(counts) == 500

import pytest

from casmkit.interp import ConstantOracle, RandomOracle, run
from casmkit.protect import protect
from casmkit.puf import make_device
from casmkit.verify import (
    StateSpaceTooLarge, clone_divergence_report, compare_target_traces,
    exhaustive_safety_check, random_safety_search, replay_witness,
)

PHASE = ("phase", ())


@pytest.fixture(scope="module")
def protected_traffic(traffic):
    device = make_device(42, 16, 16, 0.0)
    protected, enrollment = protect(traffic, device)
    return protected


class TestExhaustive:
    def test_original_traffic_light_is_safe(self, traffic):
        report = exhaustive_safety_check(traffic)
        assert report.unsafe_reachable is False
        assert report.witness is None
        assert report.explored_states <= 4 * 2 ** 4 * 2 ** 4
        assert report.transition_count > 0

    def test_agreement_with_random_runs(self, traffic):
        # where the exhaustive oracle says safe, no randomized run may
        # find a violation
        assert exhaustive_safety_check(traffic).unsafe_reachable is False
        for seed in (1, 2, 3):
            trace = run(traffic, 2000, RandomOracle(seed), seed=seed)
            for entry in trace.entries:
                assert not (entry.state[("GoLight", (1,))]
                            and entry.state[("GoLight", (2,))])

    def test_faulty_variant_found_with_short_witness(self, faulty_traffic):
        report = exhaustive_safety_check(faulty_traffic)
        assert report.unsafe_reachable is True
        assert report.witness is not None
        assert len(report.witness) <= 3
        assert replay_witness(faulty_traffic, report.witness)

    def test_witness_is_minimal(self, faulty_traffic):
        # breadth-first search finds a shortest run: no strictly shorter
        # prefix already violates
        report = exhaustive_safety_check(faulty_traffic)
        from casmkit.ast import eval_term
        state = faulty_traffic.initial_state()
        from casmkit.interp import step
        for w in report.witness[:-1]:
            state = step(faulty_traffic, state, w.monitored).state
            assert not eval_term(faulty_traffic.unsafe, state)

    def test_protected_with_adversarial_responses_is_safe(
            self, protected_traffic):
        report = exhaustive_safety_check(protected_traffic,
                                         adversarial_puf=True)
        assert report.unsafe_reachable is False
        # stored control values: enrolled responses plus the token
        assert report.explored_states <= 5 * 2 ** 4

    def test_protected_with_target_device_is_safe(self, traffic,
                                                  protected_traffic):
        device = make_device(42, 16, 16, 0.0)
        report = exhaustive_safety_check(protected_traffic,
                                         adversarial_puf=False,
                                         device=device)
        assert report.unsafe_reachable is False

    def test_state_space_cap(self, traffic):
        with pytest.raises(StateSpaceTooLarge):
            exhaustive_safety_check(traffic, max_states=8)

    def test_report_serialization(self, faulty_traffic):
        report = exhaustive_safety_check(faulty_traffic)
        import json
        payload = json.loads(report.to_json())
        assert payload["unsafeReachable"] is True
        assert len(payload["witness"]) == len(report.witness)


class TestCompareTargetTraces:
    def test_equal_on_enrollment_device(self, traffic, protected_traffic):
        oracle = ConstantOracle.always_true(traffic)
        cmp = compare_target_traces(traffic, protected_traffic, 42, 1000,
                                    oracle, run_seed=7)
        assert cmp.verdict == "EQUAL"
        assert cmp.fallback_count == 0

    def test_other_device_mismatches_quickly(self, traffic,
                                             protected_traffic):
        oracle = ConstantOracle.always_true(traffic)
        mismatched = 0
        for seed in range(100, 110):
            cmp = compare_target_traces(traffic, protected_traffic, seed,
                                        64, oracle, run_seed=7)
            if cmp.verdict == "MISMATCH":
                mismatched += 1
                assert cmp.mismatch_step <= 32
        assert mismatched == 10

    def test_mismatch_step_is_minimal(self, traffic, protected_traffic):
        oracle = ConstantOracle.always_true(traffic)
        cmp = compare_target_traces(traffic, protected_traffic, 100, 64,
                                    oracle, run_seed=7)
        assert cmp.verdict == "MISMATCH"
        # the prefix before the reported step replays equal
        again = compare_target_traces(traffic, protected_traffic, 100,
                                      cmp.mismatch_step - 1, oracle,
                                      run_seed=7)
        assert again.verdict == "EQUAL"

    def test_zero_steps_equal(self, traffic, protected_traffic):
        oracle = ConstantOracle.always_true(traffic)
        cmp = compare_target_traces(traffic, protected_traffic, 999, 0,
                                    oracle, run_seed=7)
        assert cmp.verdict == "EQUAL"


class TestCloneDivergence:
    def test_small_experiment(self, traffic, protected_traffic):
        oracle = ConstantOracle.always_true(traffic)
        original = run(traffic, 600, oracle, seed=7)
        report = clone_divergence_report(
            protected_traffic, original, [201, 202, 203, 204, 205], 600,
            0.0, oracle, run_seed=7)
        assert report.safety_violations == 0
        assert report.trials_diverged == 5
        assert report.fallback_rate > 0.9
        assert sum(report.first_divergence_hist.values()) == 5
        assert min(report.first_divergence_hist) >= 1

    def test_enrollment_device_is_flagged_as_control(self, traffic,
                                                     protected_traffic):
        oracle = ConstantOracle.always_true(traffic)
        original = run(traffic, 200, oracle, seed=7)
        report = clone_divergence_report(
            protected_traffic, original, [301, 42], 200, 0.0, oracle,
            run_seed=7)
        assert report.flagged_control_trials == [1]
        # the control trial neither falls back nor diverges
        assert report.trials_diverged == 1

    def test_json_fields(self, traffic, protected_traffic):
        import json
        oracle = ConstantOracle.always_true(traffic)
        original = run(traffic, 50, oracle, seed=7)
        report = clone_divergence_report(protected_traffic, original, [88],
                                         50, 0.0, oracle, run_seed=7)
        payload = json.loads(report.to_json())
        assert set(payload) == {"trials", "stepsPerTrial", "noise",
                                "safetyViolations", "trialsDiverged",
                                "firstDivergenceStep", "fallbackRate",
                                "flaggedControlTrials"}


class TestRandomizedSearch:
    def test_safe_program_finds_nothing(self, traffic):
        assert random_safety_search(traffic, 10, 200, 1) is None

    def test_faulty_program_is_caught(self, faulty_traffic):
        hit = random_safety_search(faulty_traffic, 10, 200, 1)
        assert hit is not None

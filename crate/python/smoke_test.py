"""Smoke test for the fdiqcd extension module.

Build and install first:

    pip install --no-build-isolation -e crates/python
"""

import math
import pathlib

import fdiqcd

ROOT = pathlib.Path(__file__).resolve().parent.parent


def small_experiment():
    text = (ROOT / "configs" / "five_sensor.toml").read_text()
    exp = fdiqcd.Experiment.from_toml(text)
    assert exp.num_nodes == 5
    assert exp.horizon == 125
    return exp


def check_simulate(exp):
    run = exp.simulate("bayes", 0)
    assert len(run["states"]) == exp.horizon + 1
    assert len(run["estimates"]) == exp.horizon + 1
    assert len(run["estimates"][1]) == exp.num_nodes
    assert run["attacked"] == 2
    quiet = exp.simulate("no-attack", 0)
    assert quiet["onset"] is None
    again = exp.simulate("bayes", 0)
    assert again["observations"] == run["observations"]


def check_traces(exp):
    traces = exp.traces("no-attack", 3, "chi2,msprt")
    assert set(traces) == {"chi2", "msprt"}
    for stats in traces.values():
        assert len(stats) == exp.num_nodes
        assert all(math.isfinite(v) for row in stats for v in row)


def check_condition():
    gain, cov = fdiqcd.condition([[2.0]], [[1.0]], [[1.0]])
    assert abs(gain[0][0] - 1.0) < 1e-12
    assert abs(cov[0][0] - 1.0) < 1e-12


def check_sweep(exp):
    res = exp.sweep(trials=10, detectors="chi2")
    assert len(res["pfa"]) == 3 * exp.num_nodes
    assert len(res["far"]) == 3 * exp.num_nodes
    for p in res["pfa"] + res["far"]:
        assert p["detector"] == "chi2"
        assert 0.0 <= p["achieved"] <= 1.0
    cal = exp.calibrate(trials=10, detectors="chi2")
    assert {c[2] for c in cal} == {"pfa", "arl"}


def check_validate():
    reports = fdiqcd.validate_all(mc_trials=2000, seed=3)
    names = [r[0] for r in reports]
    assert any("Kalman" in n for n in names), names
    for name, passed, value, tol, _ in reports:
        if "Monte Carlo" not in name:
            assert passed, (name, value, tol)


def main():
    exp = small_experiment()
    check_simulate(exp)
    check_traces(exp)
    check_condition()
    check_sweep(exp)
    check_validate()
    print("fdiqcd smoke test ok")


if __name__ == "__main__":
    main()

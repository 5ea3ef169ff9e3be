"""Smoke test for the pydriftwatch extension module.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import json
import math

import pydriftwatch as dw


def close(a, b, tol=1e-6):
    return math.isclose(a, b, abs_tol=tol)


def main():
    assert dw.synthesize_risk(("SENSITIVE", "NETWORK", "IRREVERSIBLE")) == "VIOLATED"
    assert dw.synthesize_risk(("NONE", "READ_ONLY", "FULLY_REVERSIBLE")) == "SAFE"
    merged = dw.merge_state(("INTERNAL", "NETWORK", "PARTIALLY"), ("SENSITIVE", "READ_ONLY", "FULLY_REVERSIBLE"))
    assert merged == ("SENSITIVE", "NETWORK", "PARTIALLY"), merged

    lo, hi = dw.wilson_ci(36, 38)
    assert close(lo, 0.82714, 1e-4) and close(hi, 0.98545, 1e-4), (lo, hi)

    ref = dw.TransitionMatrix.reference()
    h5 = [row[4] for row in ref.finite_horizon(5)][-1]
    curve = ref.finite_horizon(5)[-1]
    assert close(curve[1], 0.4539288, 1e-6), curve
    assert close(h5, 1.0)
    absorption = ref.absorption()
    assert all(close(a, 1.0, 1e-9) for a in absorption["absorption"])
    back = dw.TransitionMatrix.from_json(ref.to_json())
    assert back.rows() == ref.rows()

    fitted = dw.TransitionMatrix.fit([["SAFE", "MILD", "VIOLATED"], ["SAFE", "SAFE", "ELEVATED"]], alpha=1.0)
    assert fitted.order == 1

    monitor = dw.Monitor(ref, threshold=0.4)
    session = monitor.session()
    v = session.observe("read_file", sensitivity="SENSITIVE")
    assert v["level"] == "MILD" and v["flagged"], v
    v = session.observe("http_request")
    assert v["step"] == 1 and session.state[1] == "NETWORK", v
    session.close()

    traces = dw.simulate(seed=7, n=20)
    assert len(traces) == 20
    assert all("trace_id" in json.loads(t) for t in traces)

    report = dw.evaluate(seed=7)
    assert report.splitlines()[0].startswith("monitor,detected")
    print("pydriftwatch smoke test passed")
    print(report, end="")


if __name__ == "__main__":
    main()

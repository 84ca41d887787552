"""Smoke test for the prefvec_py extension.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
or put a built `prefvec_py` shared library on PYTHONPATH.
"""

import os
import tempfile

import prefvec_py as pv


def main():
    tasks = pv.TaskTable.synthetic(200, n_topics=14, seed=1)
    assert len(tasks) == 200

    backend = pv.SimBackend('{"noise_scale": 0.3}', seed=1)
    truth = backend.utilities(tasks, "assistant")

    choices = backend.elicit_choices(tasks, pairs_per_task=10, trials=3, seed=1)
    fit = pv.fit_utilities(choices, tasks)
    r_fit = pv.pearson(fit.mu(), truth)
    print(f"utility recovery r = {r_fit:.3f}")
    assert r_fit > 0.8

    x = backend.export_activations(tasks, layer=3)
    assert x.shape == (200, 64)
    probe, r_probe = pv.Probe.train(x, truth, tasks, seed=1)
    print(f"probe held-out r = {r_probe:.3f}, alpha = {probe.alpha}")
    assert r_probe > 0.8

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.pvac")
        x.write(path)
        back = pv.ActivationMatrix.read(path)
        assert back.task_ids() == x.task_ids()
        assert probe.predict(back) == probe.predict(x)
        assert pv.run_cli(["simulate", "--out", os.path.join(d, "sim"), "--override", "simulate.n_tasks=160"]) == 0
        assert os.path.exists(os.path.join(d, "sim", "run.json"))

    lo, hi = pv.wilson_ci(50, 100)
    assert abs(lo - 0.4038) < 1e-3 and abs(hi - 0.5962) < 1e-3
    print("ok")


if __name__ == "__main__":
    main()

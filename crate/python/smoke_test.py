"""Smoke test for the `adapos` extension module.

Build and install first:
    pip install --no-build-isolation -e crates/py
then run:
    python python/smoke_test.py
"""

import math
import os
import tempfile

import adapos


def main():
    assert adapos.count_configurations(6, 2, 6) == 57
    assert [adapos.count_configurations(6, n, n) for n in range(2, 7)] == [15, 20, 15, 6, 1]

    th = 0.4
    pred = [(float(i % 5), float(i // 5)) for i in range(20)]
    truth = [(math.cos(th) * x - math.sin(th) * y + 2.0, math.sin(th) * x + math.cos(th) * y - 1.0) for x, y in pred]
    a, b, cond = adapos.fit_affine(pred, truth)
    assert abs(a[0][0] - math.cos(th)) < 1e-9 and abs(b[0] - 2.0) < 1e-9 and abs(cond - 1.0) < 1e-9
    assert adapos.mae([(0.0, 0.0)], [(3.0, 4.0)]) == 5.0
    try:
        adapos.fit_affine([(0, 0), (1, 1), (2, 2)], [(0, 0), (1, 1), (2, 2)])
    except ValueError:
        pass
    else:
        raise AssertionError("collinear fit must fail")

    ds = adapos.Dataset.simulate("desk", duration_s=10.0, seed=3)
    assert ds.a_max == 6 and len(ds) == 66
    cir = ds.cir(0, 0)
    assert len(cir) == 3 and len(cir[0]) == 80

    dist = adapos.PseudoDistances(ds, mode="fused-geodesic", k=6)
    assert dist.distance(0, 0) == 0.0
    assert dist.distance(3, 9) == dist.distance(9, 3)

    model = adapos.Model("adapos", a_max=6, size="test", seed=1)
    p_all = model.predict(ds, indices=[0, 1])
    p_sub = model.predict(ds, indices=[0, 1], antennas=[4, 1])
    assert len(p_all) == 2 and len(p_sub[0]) == 2

    trained, losses = model.train(ds, dist, strategy="random-n", steps=20, batch_size=8, lr=3e-3, warmup_steps=5)
    assert len(losses) == 20 and all(math.isfinite(v) for v in losses)
    err = trained.evaluate(ds, n_e=3, seed=0, batch_size=16)
    assert err >= 0.0
    try:
        trained.evaluate(ds, n_e=1)
    except ValueError:
        pass
    else:
        raise AssertionError("n_e = 1 must be rejected")

    with tempfile.TemporaryDirectory() as tmp:
        ck = os.path.join(tmp, "m.ckpt")
        trained.save(ck)
        again = adapos.Model.load(ck)
        assert again.strategy == "random-n"
        assert again.predict(ds, indices=[5]) == trained.predict(ds, indices=[5])
        path = os.path.join(tmp, "d.bin")
        ds.save(path)
        assert adapos.Dataset.load(path).positions() == ds.positions()

    base = adapos.Model("baseline", a_max=6, size="test")
    assert len(base.predict(ds, indices=[0], antennas=[0, 2])) == 1
    print(f"adapos {adapos.__version__}: smoke test passed (eval MAE {err:.3f} m)")


if __name__ == "__main__":
    main()

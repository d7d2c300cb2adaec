"""Quick check that the extension module imports and its main entry points work."""

import tempfile

import langevo_py as lv


def main():
    stimuli = lv.enumerate_stimuli()
    assert len(stimuli) == 27
    train, test = lv.sample_training_set(7)
    assert len(train) == 15 and len(test) == 12

    with open("data/table1_train.vocab") as f:
        table = lv.parse_vocab(f.read())
    assert len(table) == 15
    ts = lv.topsim(table, seed=0, permutations=2000)
    print(f"table-1 topsim z={ts['z']:.3f} p={ts['p']:.4f}")
    assert ts["z"] > 5.0

    assert lv.levenshtein("kitten", "sitting") == 3
    t, p, df = lv.paired_t_test([1.0, 2.0, 3.0, 4.0], [0.5, 1.7, 2.2, 3.9])
    print(f"t={t:.3f} p={p:.4f} df={df}")

    sim = lv.simulate(("oracle:compositional", "oracle:compositional"), seed=3, permutations=500)
    assert sim.complete
    perc = sim.metric("communication", "perc_com", round=4)
    print(f"perc_com round 4 = {perc}")
    assert perc == 1.0
    with tempfile.TemporaryDirectory() as d:
        sim.save(d)
        ok, metrics, snapshots, problems = lv.replay(d)
        print(f"replay ok={ok} metrics={metrics} snapshots={snapshots}")
        assert ok, problems
    print("smoke test passed")


if __name__ == "__main__":
    main()

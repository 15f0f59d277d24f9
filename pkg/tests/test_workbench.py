import json

import numpy as np
import pytest

from rxnflow import cli
from rxnflow.chemgraph import canonical_smiles, graphs_equal, parse_reaction, parse_smiles
from rxnflow.workbench.bench import (attention_macs, bench_conditioning, conditioning_counts, ordering_matches)
from rxnflow.workbench.ingest import ingest_lines, ingest_uspto, split_of
from rxnflow.workbench.pipeline import Thresholds, parse_query
from rxnflow.workbench.synth import (TEMPLATES, apply_template, corpus_hash, generate_corpus, matching_templates,
                                     random_scaffold, read_corpus, write_corpus)


# -------------------------------------------------------------------- synth


@pytest.fixture(scope="module")
def small():
    return generate_corpus(300, seed=11)


def test_single_record_delta_is_one_move():
    c = generate_corpus(1, seed=0, n_valid=0, n_test=0)
    (rec,) = c.train
    d = rec.bond_delta()
    iu = np.triu_indices(rec.reactant.n_atoms, 1)
    assert sorted(d[iu][d[iu] != 0].tolist()) == [-1.0, 1.0]


def test_agent_decides_the_product():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = random_scaffold(rng, 10, ["Cl", "N", "O"])
        m = matching_templates(g)
        assert len(m) >= 2
        prods = [apply_template(g, TEMPLATES[t]) for t in m]
        assert not graphs_equal(prods[0], prods[1])
        assert all(p.n_atoms == g.n_atoms and p.is_valence_valid() for p in prods)


def test_corpus_hash_stable_and_seed_sensitive(small):
    assert corpus_hash(generate_corpus(300, seed=11)) == small.meta["hash"]
    assert generate_corpus(300, seed=12).meta["hash"] != small.meta["hash"]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_splits_disjoint(seed):
    c = generate_corpus(200, seed=seed)
    keys = [{canonical_smiles(r.reactant) for r in part} for part in (c.train, c.valid, c.test)]
    assert not (keys[0] & keys[1]) and not (keys[0] & keys[2]) and not (keys[1] & keys[2])
    assert (len(c.train), len(c.valid), len(c.test)) == (200, 20, 20)


def test_records_round_trip_through_text(small, tmp_path):
    for r in small.train[:100]:
        again = parse_reaction(r.to_line())
        assert graphs_equal(r.reactant, again.reactant) and graphs_equal(r.product, again.product)
        assert [canonical_smiles(a) for a in r.agents] == [canonical_smiles(a) for a in again.agents]
    write_corpus(small, tmp_path)
    assert corpus_hash(read_corpus(tmp_path)) == small.meta["hash"]


def test_rare_variant_frequencies():
    c = generate_corpus(2000, seed=0, variant="rare64")
    counts = {}
    for r in c.train:
        counts[canonical_smiles(r.agents[0])] = counts.get(canonical_smiles(r.agents[0]), 0) + 1
    assert len(counts) == 64 and max(counts.values()) / len(c.train) < 0.03


# ------------------------------------------------------------------- ingest

LINES = [
    "[CH3:1][C:2](=[O:3])[Cl:4].[OH:5][CH3:6].CCN(CC)CC>>[CH3:1][C:2](=[O:3])[O:5][CH3:6]",
    "F/C=C/F>>FC=CF",
    "C(C>>CC",
    "[CH3:1][O:2](C)(C)C>>[CH3:1][OH:2]",
    "[CH4:1]>>[CH3:1][OH:2]",
    "",
    "# comment",
]


def test_ingest_census():
    res = ingest_lines(LINES)
    assert res.accepted == 1 and res.seen == 5
    assert res.census == {"unsupported_feature": 1, "syntax_error": 1, "valence": 1, "atom_conservation": 1}
    (rec,) = res.corpus.train + res.corpus.valid + res.corpus.test
    assert rec.reactant.n_atoms == 6 and len(rec.agents) == 1
    assert canonical_smiles(rec.agents[0]) == canonical_smiles(parse_smiles("CCN(CC)CC"))


def test_ingest_files(tmp_path):
    (tmp_path / "empty.txt").write_text("")
    res = ingest_uspto(tmp_path / "empty.txt")
    assert res.accepted == 0 and not res.corpus.train
    with pytest.raises(OSError):
        ingest_uspto(tmp_path / "missing.txt")


def test_split_of_fractions():
    got = [split_of(f"k{i}") for i in range(5000)]
    assert abs(got.count("test") / 5000 - 0.1) < 0.02 and split_of("abc") == split_of("abc")


# -------------------------------------------------------------------- bench


def test_conditioning_algebra():
    assert conditioning_counts(16, 0).ratio == 1.0
    assert conditioning_counts(16, 16).ratio == 4.0
    f = [conditioning_counts(16, c) for c in (8, 16, 32)]
    assert f[0].fusion_attention < f[1].fusion_attention < f[2].fusion_attention
    assert len({r.film_attention + r.film_extra for r in f}) == 1
    growth = [attention_macs(16 + c, 64) - attention_macs(16, 64) for c in (8, 16, 32)]
    assert growth[2] - growth[1] > growth[1] - growth[0]  # superlinear in L_C


def test_bench_rows_and_ordering():
    rows = bench_conditioning(16, (0, 8), repeats=1, batch=4)
    assert [r.l_c for r in rows] == [0, 8] and all(r.fusion_seconds > 0 for r in rows)
    fake = [conditioning_counts(16, c) for c in (8, 16)]
    fake[0].fusion_seconds, fake[0].film_seconds = 2.0, 1.0
    fake[1].fusion_seconds, fake[1].film_seconds = 3.0, 1.0
    assert ordering_matches(fake)
    fake[1].fusion_seconds = 1.5
    assert not ordering_matches(fake)


# ----------------------------------------------------------------- pipeline


def test_parse_query_and_thresholds():
    rec = parse_query("[CH3:1][Cl:2].[OH2:3]>O>")
    assert rec.product is rec.reactant and len(rec.agents) == 1
    th = Thresholds.parse("speed=0.2,plateau=4,lambda=0.5")
    assert (th.speed, th.plateau, th.lam) == (0.2, 4, 0.5)
    with pytest.raises(ValueError):
        Thresholds.parse("speed=fast")


# ---------------------------------------------------------------------- CLI

TINY = ["--epochs", "1", "--d", "16", "--enc-layers", "1", "--heads", "2", "--dec-layers", "1",
        "--field-hidden", "32", "--k", "16", "--batch-size", "16", "--eval-limit", "5"]


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--n", "120", "--seed", "7", "--out", str(root / "toy")]) == 0
    assert cli.main(["train", "--data", str(root / "toy"), "--out", str(root / "run"), *TINY]) == 0
    return root


def test_cli_train_writes_files(cli_run):
    for name in ("config.txt", "agents.tsv", "model.lrxf", "report.csv"):
        assert (cli_run / "run" / name).exists()


def test_cli_eval_and_predict(cli_run, capsys):
    capsys.readouterr()
    assert cli.main(["eval", "--model", str(cli_run / "run"), "--data", str(cli_run / "toy"), "--k", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n"] == 12 and out["top2"] >= out["top1"]
    line = (cli_run / "toy" / "test.txt").read_text().splitlines()[0].split()[0]
    assert cli.main(["predict", "--model", str(cli_run / "run"), "--rxn", line]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 and "product" in json.loads(lines[0])


def test_cli_gate_reproduces_verdicts(cli_run, capsys):
    d = cli_run / "diag"
    assert cli.main(["diagnose", "--model", str(cli_run / "run"), "--data", str(cli_run / "toy"),
                     "--out", str(d)]) == 0
    assert cli.main(["gate", "--trajectories", str(d / "trajectories.jsonl"),
                     "--thresholds", "speed=0.15,plateau=3", "--out", str(d / "again.csv")]) == 0
    assert (d / "again.csv").read_bytes() == (d / "verdicts.csv").read_bytes()
    assert (d / "pca.csv").read_text().startswith("reaction_id,step,pc1,pc2\n")


def test_cli_errors(cli_run, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--bogus"])
    assert exc.value.code == 2
    capsys.readouterr()
    assert cli.main(["eval", "--model", str(cli_run / "nope"), "--data", str(cli_run / "toy")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["command"] == "eval" and err["error"] == "CliError"
    assert cli.main(["predict", "--model", str(cli_run / "run"), "--rxn", "C(C>>C"]) == 1

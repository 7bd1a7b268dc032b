import hashlib
import json
from pathlib import Path

import pytest

from swgcn.cli import RunConfig, main
from swgcn.data import InteractionRecord, load_split, write_interactions

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--users", "30", "--items", "25",
                 "--counts", "200,120,120", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--config", str(CONFIGS / "synthetic.conf"), "--dataset", str(synth_dir),
                 "--out", str(out), "--epochs", "3", "--dim", "8", "--k-list", "5,10"])
    assert code == 0
    return out


class TestRunConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.d, c.learning_rate, c.neg_samples, c.patience, c.batch_size) == (32, 1e-3, 4, 50, 2048)
        assert c.k_list == (10, 20, 50, 100, 200)

    def test_round_trip(self):
        c = RunConfig(lambda_s=0.3, behaviors=("a", "b"), mask_train=False, delimiter=",")
        assert RunConfig.from_text(c.to_text()) == c

    def test_comments_and_errors(self):
        c = RunConfig.from_text("# header\nseed = 4  # trailing\n\nlambda_a = 0.25\n")
        assert (c.seed, c.lambda_a) == (4, 0.25)
        with pytest.raises(Exception, match="unknown"):
            RunConfig.from_text("bogus = 1\n")
        with pytest.raises(Exception, match="lambda_a"):
            RunConfig.from_text("lambda_a = 1.5\n")

    @pytest.mark.parametrize("name,behaviors,threshold", [
        ("beibei", ("pv", "cart", "buy"), 0),
        ("taobao", ("pv", "fav", "cart", "buy"), 5),
    ])
    def test_preset_configs(self, name, behaviors, threshold):
        c = RunConfig.from_text((CONFIGS / f"{name}.conf").read_text())
        assert c.behaviors == behaviors and c.min_target_count == threshold


class TestPreprocess:
    def _raw(self, tmp_path):
        recs = []
        for u in range(4):
            for t in range(5):
                recs.append(InteractionRecord(f"u{u}", f"i{(u + t) % 6}", 0, t))
                recs.append(InteractionRecord(f"u{u}", f"i{(u + t) % 6}", 1, 10 + t))
        write_interactions(tmp_path / "raw.tsv", recs, ["pv", "cart", "buy"][1:])
        return tmp_path / "raw.tsv"

    def test_beibei_style_and_rerun(self, tmp_path):
        raw = self._raw(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["preprocess", "--config", str(CONFIGS / "beibei.conf"), "--raw", str(raw),
                         "--behaviors", "cart,buy", "--out", str(out)]) == 0
        assert sha(a / "manifest.json") == sha(b / "manifest.json")
        man = json.loads((a / "manifest.json").read_text())
        assert man["num_users"] == 4 and man["counts"] == {"cart": 20, "buy": 20}
        run = json.loads((a / "run_manifest.json").read_text())
        assert run["command"] == "preprocess" and "version" in run
        assert load_split(a).train.num_users == 4

    def test_taobao_style_filter(self, tmp_path):
        # user 1 and item 10 have a single purchase; users 2-6 buy items 20-25
        lines = ["1,10,5,pv,1", "1,10,5,buy,2"]
        lines += [f"{u},{i},5,buy,{i}" for u in range(2, 7) for i in range(20, 26)]
        (tmp_path / "raw.csv").write_text("\n".join(lines) + "\n")
        assert main(["preprocess", "--config", str(CONFIGS / "taobao.conf"),
                     "--raw", str(tmp_path / "raw.csv"), "--out", str(tmp_path / "d")]) == 0
        man = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert man["num_users"] == 5 and man["num_items"] == 6

    def test_bad_raw_line(self, tmp_path, capsys):
        (tmp_path / "raw.tsv").write_text("u1\ti1\tbuy\n")
        code = main(["preprocess", "--raw", str(tmp_path / "raw.tsv"), "--behaviors", "pv,buy",
                     "--out", str(tmp_path / "o")])
        err = capsys.readouterr().err.strip().splitlines()
        assert code != 0 and len(err) == 1 and err[0].startswith("error[data]:")


class TestSynth:
    def test_outputs_and_determinism(self, synth_dir, tmp_path):
        from swgcn.data import Affinity, load_interactions
        assert main(["synth", "--out", str(tmp_path), "--users", "30", "--items", "25",
                     "--counts", "200,120,120", "--seed", "3"]) == 0
        for f in ("interactions.tsv", "manifest.json", "train.tsv", "test.tsv"):
            assert sha(tmp_path / f) == sha(synth_dir / f)
        runs = [json.loads((d / "run_manifest.json").read_text()) for d in (tmp_path, synth_dir)]
        for r in runs:
            del r["config"]["out"]
        assert runs[0] == runs[1] and runs[0]["seed"] == 3
        recs = load_interactions(tmp_path / "interactions.tsv", ["aux1", "aux2", "target"])
        assert [sum(r.behavior == b for r in recs) for b in range(3)] == [200, 120, 120]
        aff = Affinity.load(tmp_path / "affinity.npz")
        assert aff.matrix.shape == (30, 25)
        assert aff(recs[0].user, recs[0].item) == aff.matrix[aff.user_ids.index(recs[0].user),
                                                             aff.item_ids.index(recs[0].item)]


class TestTrainEval:
    def test_train_outputs(self, run_dir):
        for f in ("manifest.json", "config.txt", "metrics.jsonl", "checkpoint.npz", "report_test.txt",
                  "report_test.csv"):
            assert (run_dir / f).exists(), f
        man = json.loads((run_dir / "manifest.json").read_text())
        assert man["config"]["d"] == 8 and man["config"]["max_epochs"] == 3
        assert man["config"]["learning_rate"] == 0.005  # from the config file
        assert len((run_dir / "metrics.jsonl").read_text().splitlines()) <= 3

    def test_eval_twice_identical(self, run_dir, synth_dir, tmp_path):
        outs = [tmp_path / "e1", tmp_path / "e2"]
        for out in outs:
            assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"),
                         "--dataset", str(synth_dir), "--out", str(out), "--k-list", "5,10"]) == 0
        assert sha(outs[0] / "report_test.csv") == sha(outs[1] / "report_test.csv")
        assert (outs[0] / "report_test.csv").read_text() == (run_dir / "report_test.csv").read_text()

    def test_eval_default_k_list(self, run_dir, synth_dir, tmp_path):
        main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"), "--dataset", str(synth_dir),
              "--out", str(tmp_path), "--k-list", "10,20,50,100,200", "--mask-train", "off"])
        ks = [line.split(",")[1] for line in (tmp_path / "report_test.csv").read_text().splitlines()[1::2]]
        assert ks == ["10", "20", "50", "100", "200"]

    def test_missing_checkpoint(self, synth_dir, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "nope.npz"), "--dataset", str(synth_dir)])
        err = capsys.readouterr().err.strip()
        assert code != 0 and err.startswith("error[io]:") and "\n" not in err

    @pytest.mark.parametrize("variant", ["no_tpw", "no_sat"])
    def test_variants_run(self, synth_dir, tmp_path, variant):
        assert main(["train", "--dataset", str(synth_dir), "--out", str(tmp_path), "--variant", variant,
                     "--epochs", "1", "--dim", "4", "--batch-size", "256", "--lambda_s", "0.0",
                     "--sat-mode", "signed", "--p-message", "0.1"]) == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["config"]["variant"] == variant

    def test_bad_flag_value(self, synth_dir, tmp_path, capsys):
        code = main(["train", "--dataset", str(synth_dir), "--out", str(tmp_path), "--lambda_a", "2"])
        assert code != 0 and capsys.readouterr().err.startswith("error[config]:")


class TestReport:
    def test_csv_and_plot(self, run_dir, synth_dir, tmp_path):
        users = "u00,u01,u02"
        for out in (tmp_path / "a", tmp_path / "b"):
            assert main(["report", "--checkpoint", str(run_dir / "checkpoint.npz"), "--dataset",
                         str(synth_dir), "--users", users, "--out", str(out), "--plot"]) == 0
        assert sha(tmp_path / "a" / "synergy.png") == sha(tmp_path / "b" / "synergy.png")
        rows = (tmp_path / "a" / "synergy.csv").read_text().splitlines()
        assert rows[0].startswith("user,cell,item_count,mean_weight")
        split = load_split(synth_dir)
        for user in users.split(","):
            u = split.train.user_index(user)
            items = {int(i) for e in split.train.edges for uu, i in e if uu == u}
            assert sum(int(r.split(",")[2]) for r in rows[1:] if r.startswith(user + ",")) == len(items)

    def test_unknown_user(self, run_dir, synth_dir, tmp_path, capsys):
        code = main(["report", "--checkpoint", str(run_dir / "checkpoint.npz"), "--dataset",
                     str(synth_dir), "--users", "ghost", "--out", str(tmp_path)])
        assert code != 0 and capsys.readouterr().err.startswith("error[report]:")

    def test_thread_env(self, run_dir, synth_dir, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SWGCN_THREADS", "many")
        code = main(["report", "--checkpoint", str(run_dir / "checkpoint.npz"), "--dataset",
                     str(synth_dir), "--users", "u00", "--out", str(tmp_path)])
        assert code == 2 and "SWGCN_THREADS" in capsys.readouterr().err

import contextlib
import io
import json
import os
import shutil
import tempfile
import unittest
from unittest import mock

from cryptogram import cli
from cryptogram.cipher import CipherMapping, encrypt_text
from cryptogram.corpus import read_records


this_path = os.path.abspath(os.path.dirname(__file__))
QUOTES = os.path.join(this_path, "input_files/quotes.txt")
MULTILINGUAL = os.path.join(this_path, "input_files/multilingual.jsonl")


def run(argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = cli.main(argv)
    return code, out.getvalue()


class TestIngest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_lines(self):
        code, _ = run(["ingest", QUOTES, "--out-dir", self.tmp, "--seed", "2"])
        self.assertEqual(code, cli.EXIT_OK)
        train = read_records(os.path.join(self.tmp, "train.jsonl"))
        test = read_records(os.path.join(self.tmp, "test.jsonl"))
        self.assertEqual((len(train), len(test)), (31, 1))
        with open(os.path.join(self.tmp, "ingest_report.json")) as fp:
            report = json.load(fp)
        self.assertEqual(report["records_kept"], 32)
        self.assertEqual(report["drop_reasons"]["out_of_vocabulary"], 2)

    def test_segments(self):
        code, _ = run(
            ["ingest", MULTILINGUAL, "--out-dir", self.tmp, "--segments", "60", "--train-frac", "1.0"]
        )
        self.assertEqual(code, cli.EXIT_OK)
        records = read_records(os.path.join(self.tmp, "train.jsonl"))
        self.assertTrue(records)
        self.assertTrue(all(r.length >= 60 for r in records))
        self.assertEqual({r.language for r in records}, {"en", "fr", "de"})
        self.assertTrue(all(r.text == r.text.upper() for r in records))

    def test_missing_file(self):
        code, _ = run(["ingest", os.path.join(self.tmp, "nope.txt"), "--out-dir", self.tmp])
        self.assertEqual(code, cli.EXIT_RUNTIME)


class TestEndToEnd(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.corpus = os.path.join(cls.tmp, "corpus")
        cls.run_dir = os.path.join(cls.tmp, "run")
        assert cli.main(["ingest", QUOTES, "--out-dir", cls.corpus, "--train-frac", "0.8"]) == 0
        cls.config = os.path.join(cls.tmp, "tiny.json")
        with open(cls.config, "w") as fp:
            json.dump(
                {
                    "model": {"size_tag": "custom", "d_model": 16, "n_layers": 2, "n_heads": 2, "ffn_dim": 32},
                    "train": {"steps": 2, "batch_size": 4, "checkpoint_every": 2, "val_every": 2, "val_size": 4},
                    "data": {"corpus_dir": cls.corpus},
                },
                fp,
            )
        assert cli.main(["train", "--config", cls.config, "--out-dir", cls.run_dir]) == 0
        cls.checkpoint = os.path.join(cls.run_dir, "checkpoints", "step_0000002.pt")
        cls.test_data = os.path.join(cls.corpus, "test.jsonl")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    def test_run_directory(self):
        for name in ("manifest.json", "metrics.csv", "checkpoints"):
            self.assertTrue(os.path.exists(os.path.join(self.run_dir, name)), name)
        with open(os.path.join(self.run_dir, "manifest.json")) as fp:
            manifest = json.load(fp)
        self.assertEqual(manifest["config"]["model"]["d_model"], 16)

    def test_decrypt(self):
        ciphertext = encrypt_text("ATTACK AT DAWN.", CipherMapping.from_string("DBTKFICERGAHQJNMOLVSPZYUWX"))
        code, out = run(["decrypt", "--checkpoint", self.checkpoint, ciphertext])
        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(len(out.rstrip("\n")), len(ciphertext))
        code, out = run(["decrypt", "--checkpoint", self.checkpoint, ciphertext.lower()])
        self.assertEqual(code, cli.EXIT_OK)

    def test_decrypt_from_file(self):
        path = os.path.join(self.tmp, "cipher.txt")
        with open(path, "w") as fp:
            fp.write("XYZ ZYX.\n")
        code, out = run(["decrypt", "--checkpoint", self.checkpoint, "--file", path])
        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(len(out.rstrip("\n")), len("XYZ ZYX."))

    def test_decrypt_bad_input(self):
        self.assertEqual(run(["decrypt", "--checkpoint", self.checkpoint, "   "])[0], cli.EXIT_USAGE)
        self.assertEqual(run(["decrypt", "--checkpoint", self.checkpoint, "CAFÉ"])[0], cli.EXIT_USAGE)
        self.assertEqual(run(["decrypt", "--checkpoint", self.checkpoint, "A" * 400])[0], cli.EXIT_USAGE)
        missing = os.path.join(self.tmp, "missing.pt")
        self.assertEqual(run(["decrypt", "--checkpoint", missing, "ABC"])[0], cli.EXIT_RUNTIME)

    def test_analyze_eval(self):
        code, _ = run(["analyze", "eval", "--checkpoint", self.checkpoint, "--out-dir", self.run_dir, "--data", self.test_data])
        self.assertEqual(code, cli.EXIT_OK)
        for sub in ("eval", "eval_frequency_baseline"):
            self.assertTrue(os.path.exists(os.path.join(self.run_dir, "analysis", sub, "summary.json")))

    def test_analyze_early_exit_and_attention(self):
        args = ["--checkpoint", self.checkpoint, "--out-dir", self.run_dir, "--data", self.test_data]
        code, out = run(["analyze", "early-exit"] + args)
        self.assertEqual(code, cli.EXIT_OK)
        self.assertTrue(out.startswith("in"))
        self.assertEqual(run(["analyze", "attn", "--text", "HELLO"] + args)[0], cli.EXIT_OK)
        self.assertTrue(os.path.exists(os.path.join(self.run_dir, "analysis", "attention.npy")))

    def test_analyze_probe_and_bench(self):
        args = ["--checkpoint", self.checkpoint, "--out-dir", self.run_dir, "--data", self.test_data]
        code, _ = run(["analyze", "probe", "--kind", "mlp", "--probe-steps", "2"] + args)
        self.assertEqual(code, cli.EXIT_OK)
        self.assertTrue(os.path.exists(os.path.join(self.run_dir, "analysis", "probe_similarity_mlp.csv")))
        code, _ = run(["analyze", "bench", "--n", "2", "--len", "8", "--repeats", "1", "--batch-size", "1"] + args)
        self.assertEqual(code, cli.EXIT_OK)
        with open(os.path.join(self.run_dir, "analysis", "bench.json")) as fp:
            self.assertEqual(json.load(fp)["n_sequences"], 2)

    def test_probes_fit_on_training_records(self):
        args = ["--checkpoint", self.checkpoint, "--out-dir", self.run_dir, "--data", self.test_data]
        with mock.patch.object(cli, "train_layer_probes", wraps=cli.train_layer_probes) as fit, mock.patch.object(
            cli, "probe_similarity_matrix", wraps=cli.probe_similarity_matrix
        ) as score:
            code, _ = run(["analyze", "probe", "--probe-steps", "2"] + args)
        self.assertEqual(code, cli.EXIT_OK)
        train_texts = [r.text for r in read_records(os.path.join(self.corpus, "train.jsonl"))]
        test_texts = [r.text for r in read_records(self.test_data)]
        self.assertEqual([r.text for r in fit.call_args[0][1]], train_texts)
        self.assertEqual([r.text for r in score.call_args[0][2]], test_texts)

        missing = os.path.join(self.tmp, "no_train.jsonl")
        code, _ = run(["analyze", "probe", "--probe-steps", "2", "--train-data", missing] + args)
        self.assertEqual(code, cli.EXIT_USAGE)

    def test_analyze_text_out_of_vocabulary(self):
        args = ["--checkpoint", self.checkpoint, "--out-dir", self.run_dir]
        self.assertEqual(run(["analyze", "attn", "--text", "CAFÉ"] + args)[0], cli.EXIT_USAGE)
        self.assertEqual(run(["analyze", "attn", "--text", "   "] + args)[0], cli.EXIT_USAGE)
        self.assertEqual(run(["analyze", "attn", "--text", "hello"] + args)[0], cli.EXIT_OK)

    def test_analyze_usage_errors(self):
        args = ["--checkpoint", self.checkpoint, "--out-dir", self.run_dir]
        self.assertEqual(run(["analyze", "summarize"] + args)[0], cli.EXIT_USAGE)
        self.assertEqual(run(["analyze", "eval"] + args)[0], cli.EXIT_USAGE)

    def test_bijective_decrypt_writes_key(self):
        run_dir = os.path.join(self.tmp, "bijective_run")
        code, _ = run(["train", "--config", self.config, "--out-dir", run_dir, "--head", "bijective"])
        self.assertEqual(code, cli.EXIT_OK)
        checkpoint = os.path.join(run_dir, "checkpoints", "step_0000002.pt")
        key_dir = os.path.join(self.tmp, "key")
        code, out = run(["decrypt", "--checkpoint", checkpoint, "--key-dir", key_dir, "XYZ ZYX."])
        self.assertEqual(code, cli.EXIT_OK)
        lines = out.splitlines()
        self.assertEqual(len(lines[0]), len("XYZ ZYX."))
        self.assertTrue(lines[1].startswith("key: "))
        with open(os.path.join(key_dir, "key.txt")) as fp:
            self.assertEqual(fp.read().strip(), lines[1][len("key: "):])
        self.assertTrue(os.path.exists(os.path.join(key_dir, "key_matrix.csv")))

    def test_bad_config(self):
        path = os.path.join(self.tmp, "bad.json")
        with open(path, "w") as fp:
            json.dump({"train": {"steps": 0}}, fp)
        code, _ = run(["train", "--config", path, "--out-dir", os.path.join(self.tmp, "bad_run")])
        self.assertEqual(code, cli.EXIT_USAGE)
        with self.assertRaises(SystemExit) as ctx:
            run(["train"])
        self.assertEqual(ctx.exception.code, 2)


if __name__ == "__main__":
    unittest.main()

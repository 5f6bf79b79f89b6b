# Copyright 2024 Tarkan Al-Kazily

import json
import math
import unittest

import putri
import putri.pruning
import putri.report
from putri.evaluation import PerplexityResult
from putri.pruning import AblationRow, PruneConfig

import fixtures


class TestReportEncoding(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        model = fixtures.random_model("micro", seed=4)
        calib = fixtures.calib(seq_len=32, n_seqs=2)
        cls.model = model
        _, cls.report = putri.putri(model, calib, calib, PruneConfig(0.5))

    def test_format_float(self):
        self.assertEqual(0.333333, putri.report.format_float(1 / 3))
        self.assertEqual("inf", putri.report.format_float(math.inf))
        self.assertEqual("-inf", putri.report.format_float(-math.inf))
        self.assertEqual("nan", putri.report.format_float(math.nan))

    def test_canonical_json(self):
        text = putri.report.canonical_json(self.report)
        decoded = json.loads(text)
        self.assertEqual(text, json.dumps(decoded, sort_keys=True, separators=(",", ":")))
        self.assertNotIn("wall_clock_seconds", decoded)
        self.assertEqual("ok", decoded["status"])
        self.assertEqual(0.5, decoded["config"]["target_sparsity"])
        self.assertEqual(
            self.report.allocation.keep_per_layer, decoded["allocation"]["keep_per_layer"]
        )
        self.assertEqual(2, sum(len(r) for r in decoded["removed_kv_heads"]))
        self.assertIn("before", decoded["perplexity"]["eval"])

    def test_timing(self):
        decoded = json.loads(putri.report.canonical_json(self.report, include_timing=True))
        self.assertIn("wall_clock_seconds", decoded)

    def test_infinite_perplexity(self):
        report = putri.pruning.failed_report(self.model, PruneConfig(0.5), ValueError("boom"))
        before = PerplexityResult(math.inf, 3, math.inf)
        report.perplexity = {"eval": {"before": before, "after": None}}
        decoded = json.loads(putri.report.canonical_json(report))
        self.assertEqual("failed", decoded["status"])
        self.assertEqual("boom", decoded["error"])
        self.assertEqual("inf", decoded["perplexity"]["eval"]["before"]["value"])
        self.assertIsNone(decoded["perplexity"]["eval"]["after"])
        self.assertIsNone(decoded["allocation"])

    def test_summary_csv(self):
        lines = putri.report.summary_csv(self.report).splitlines()
        self.assertEqual(",".join(putri.report.SUMMARY_COLUMNS), lines[0])
        row = dict(zip(putri.report.SUMMARY_COLUMNS, lines[1].split(",")))
        self.assertEqual("ok", row["status"])
        self.assertEqual("0.5", row["target_sparsity"])

    def test_failed_summary(self):
        report = putri.pruning.failed_report(self.model, PruneConfig(0.9), ValueError("x"))
        row = putri.report.summary_row(report)
        self.assertEqual("failed", row["status"])
        self.assertEqual("nan", row["achieved_sparsity"])
        self.assertEqual("nan", row["ppl_after"])

    def test_ablation_csv(self):
        rows = [
            AblationRow("putri", 0.5, 0, 0.498, PerplexityResult(12.34567891, 10, 25.1)),
            AblationRow("no_ffn_update", 0.75, 1, None, None, "infeasible"),
            AblationRow("full_attention", 0.75, 2, 0.75, PerplexityResult(math.inf, 10, math.inf)),
        ]
        self.assertEqual(
            [
                "variant,sparsity,seed,achieved,ppl",
                "putri,0.5,0,0.498,12.3457",
                "no_ffn_update,0.75,1,nan,nan",
                "full_attention,0.75,2,0.75,inf",
            ],
            putri.report.ablation_csv(rows).splitlines(),
        )


if __name__ == "__main__":
    unittest.main()

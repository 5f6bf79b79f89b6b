# Copyright 2024 Tarkan Al-Kazily

import itertools
import math
import statistics
import unittest

import torch

import putri
import putri.pruning
import putri.report
from putri.pruning import (
    PruneConfig,
    SparsityAllocation,
    allocate,
    prune_attention_heads,
    select_keep,
)

import fixtures


def grid_model(n_layers: int, ffn_ratio: float) -> putri.ToyTransformer:
    # d_model 4, one KV head of width 2 shared by two query heads: 48 attention params/layer
    d_ff = {1: 4, 3: 12, 4.5: 18}[ffn_ratio]
    config = putri.ModelConfig(
        d_model=4,
        n_layers=n_layers,
        n_q_heads=2,
        n_kv_heads=1,
        head_dim=2,
        d_ff=d_ff,
        vocab_size=putri.data.VOCAB_SIZE,
    )
    return putri.init_random(config, 0)


def hand_allocation(model: putri.ToyTransformer, s: float, alpha: float) -> tuple[int, int, int]:
    mc = model.config
    ffn, attn = model.prunable_params()
    n_attn = math.floor(mc.n_layers * s ** (ffn / (alpha * attn)) + 0.5)
    n_heads = min(mc.n_kv_heads * n_attn, mc.n_kv_heads * mc.n_layers)
    s_ffn = (s * (ffn + attn) - n_heads * mc.head_params) / ffn
    s_ffn = min(max(s_ffn, 0.0), 1.0)
    keep = max(math.floor((1.0 - s_ffn) * mc.d_ff + 0.5), 1)
    return n_attn, n_heads, keep


def removal_counts(report: putri.PruneReport, config: putri.ModelConfig) -> tuple[int, int]:
    ffn = sum(len(kept) for kept in report.kept_ffn_nodes) * config.node_params
    attn = sum(config.n_kv_heads - len(removed) for removed in report.removed_kv_heads)
    return ffn, attn * config.head_params


def slice_oracle(model: putri.ToyTransformer, sequence, budget: int) -> list[tuple[int, int]]:
    """Greedy head removal scored on physically sliced copies of the model."""
    chosen = []
    for _ in range(budget):
        scored = []
        for layer, weights in enumerate(model.layers):
            for head in weights.kv_heads:
                candidate = putri.remove_kv_head(model.clone(), layer, head)
                scored.append((putri.perplexity(candidate, [sequence]).value, (layer, head)))
        _, best = min(scored)
        chosen.append(best)
        model = putri.remove_kv_head(model, *best)
    return chosen


class TestAllocation(unittest.TestCase):
    def test_grid(self):
        sparsities = [0, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99]
        for n_layers, ratio in itertools.product([2, 4, 8, 32], [1, 3, 4.5]):
            model = grid_model(n_layers, ratio)
            ffn, attn = model.prunable_params()
            self.assertEqual(ratio, ffn / attn)
            max_sparsity = putri.pruning.max_achievable_sparsity(model, 1)
            for s, alpha in itertools.product(sparsities, [1.0, 1.5]):
                config = PruneConfig(target_sparsity=s, alpha=alpha)
                case = (n_layers, ratio, s, alpha)
                if s > max_sparsity:
                    with self.assertRaises(putri.InfeasibleTargetError, msg=case):
                        allocate(config, model)
                    continue
                allocation = allocate(config, model)
                n_attn, n_heads, keep = hand_allocation(model, s, alpha)
                self.assertEqual(n_attn, allocation.n_attn_layers_equiv, case)
                self.assertEqual(n_heads, allocation.n_kv_heads_to_remove, case)
                self.assertEqual(keep, allocation.keep_per_layer, case)

    def test_tiny_preset_values(self):
        model = fixtures.random_model("tiny")
        expected = {0.0: (0, 256), 0.5: (0, 101), 0.75: (4, 51), 0.95: (6, 2)}
        for s, (heads, keep) in expected.items():
            allocation = allocate(PruneConfig(target_sparsity=s), model)
            self.assertEqual(heads, allocation.n_kv_heads_to_remove, s)
            self.assertEqual(keep, allocation.keep_per_layer, s)
            self.assertEqual(196608, allocation.ffn_params)
            self.assertEqual(40960, allocation.attn_params)

    def test_infeasible(self):
        model = fixtures.random_model("tiny")
        with self.assertRaises(putri.InfeasibleTargetError) as ctx:
            allocate(PruneConfig(target_sparsity=0.999), model)
        self.assertAlmostEqual((40960 + 4 * 255 * 192) / 237568, ctx.exception.max_sparsity)

    def test_p_min(self):
        model = fixtures.random_model("tiny")
        allocation = allocate(PruneConfig(target_sparsity=0.95, p_min=16), model)
        self.assertEqual(16, allocation.keep_per_layer)
        with self.assertRaises(putri.ConfigError):
            allocate(PruneConfig(target_sparsity=0.5, p_min=257), model)

    def test_pruned_model_rejected(self):
        model = putri.remove_kv_head(fixtures.random_model("micro"), 0, 0)
        with self.assertRaises(putri.ConfigError):
            allocate(PruneConfig(target_sparsity=0.5), model)

    def test_round_half_away(self):
        self.assertEqual(3, putri.pruning.round_half_away(2.5))
        self.assertEqual(2, putri.pruning.round_half_away(2.4999))
        self.assertEqual(-3, putri.pruning.round_half_away(-2.5))
        self.assertEqual(0, putri.pruning.round_half_away(0.0))

    def test_config_validation(self):
        for bad in (
            dict(target_sparsity=1.0),
            dict(target_sparsity=-0.1),
            dict(target_sparsity=0.5, alpha=0.0),
            dict(target_sparsity=0.5, heads_per_iteration=0),
            dict(target_sparsity=0.5, score_sequences=0),
            dict(target_sparsity=0.5, ridge=-1.0),
            dict(target_sparsity=0.5, workers=0),
        ):
            with self.assertRaises(putri.ConfigError, msg=bad):
                PruneConfig(**bad)


class TestFfnPruning(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = fixtures.random_model("micro", seed=8)
        cls.calib = fixtures.calib(seq_len=32, n_seqs=4)

    def keep(self, model: putri.ToyTransformer, keep: int) -> SparsityAllocation:
        ffn, attn = model.prunable_params()
        return SparsityAllocation(0, 0, 0.0, keep, 0.0, ffn, attn)

    def test_select_keep(self):
        self.assertEqual([1, 2], select_keep(torch.tensor([1.0, 9.0, 3.0]), 2))
        self.assertEqual([0, 1], select_keep(torch.tensor([2.0, 2.0, 2.0]), 2))
        self.assertEqual([], select_keep(torch.tensor([2.0, 1.0]), 0))
        with self.assertRaises(putri.ConfigError):
            select_keep(torch.tensor([1.0]), 2)

    def test_scores_are_column_norms(self):
        z = torch.tensor([[3.0, 0.0], [4.0, 1.0]])
        self.assertEqual([25.0, 1.0], putri.score_ffn_nodes(z).tolist())

    def test_scores_scale_with_activations(self):
        symmetric = torch.tensor([[1.0, 2.0], [2.0, 1.0]])
        self.assertEqual([5.0, 5.0], putri.score_ffn_nodes(symmetric).tolist())
        self.assertEqual([0], select_keep(putri.score_ffn_nodes(symmetric), 1))
        z = putri.pruning.collect_taps(self.model, self.calib, [0])[0]
        scores = putri.score_ffn_nodes(z)
        keep = select_keep(scores, 20)
        # Powers of two scale exactly, so the ranking cannot move
        for c in (0.25, 4.0, 1024.0):
            scaled = putri.score_ffn_nodes(c * z)
            self.assertTrue(torch.equal(scaled, c * c * scores), c)
            self.assertEqual(keep, select_keep(scaled, 20), c)

    def test_refit_never_worse_than_slicing(self):
        for seed in range(5):
            model = fixtures.random_model("micro", seed=20 + seed)
            calib = fixtures.calib(seed=seed, seq_len=32, n_seqs=4)
            _, records = putri.prune_ffn_sequential(
                model, calib, self.keep(model, 20), PruneConfig(target_sparsity=0.5)
            )
            for record in records:
                slack = record.residual_before * 1e-6 + 1e-6
                self.assertLessEqual(
                    record.residual_after, record.residual_before + slack, (seed, record.layer)
                )

    def test_update_residual_contained_in_slicing(self):
        taps = putri.pruning.collect_taps(self.model, self.calib, [0, 1])
        totals = {}
        for no_update in (False, True):
            config = PruneConfig(target_sparsity=0.5, no_ffn_update=no_update)
            records = [
                putri.pruning.prune_ffn_layer(self.model, layer, taps[layer], 20, config)[1]
                for layer in (0, 1)
            ]
            totals[no_update] = sum(record.residual_after for record in records)
        self.assertLessEqual(totals[False], totals[True] * (1 + 1e-6) + 1e-6)
        self.assertLess(totals[False], totals[True])

    def test_keep_all_preserves_output(self):
        pruned, records = putri.prune_ffn_sequential(
            self.model, self.calib, self.keep(self.model, 64), PruneConfig(target_sparsity=0.0)
        )
        self.assertEqual([64, 64], [layer.ff_live for layer in pruned.layers])
        tokens = self.calib.sequences[0]
        after = putri.forward(pruned, tokens).double()
        before = putri.forward(self.model, tokens).double()
        self.assertLessEqual(float((after - before).abs().max() / before.abs().max()), 1e-4)

    def test_collect_taps_skips_pad(self):
        calib = putri.CalibrationSet(((1, 2, 3, putri.data.PAD),), 4, "")
        taps = putri.pruning.collect_taps(self.model, calib, [0, 1])
        self.assertEqual((3, 64), tuple(taps[0].shape))
        self.assertEqual(torch.float64, taps[1].dtype)

    def test_refit_lowers_residual(self):
        z = putri.pruning.collect_taps(self.model, self.calib, [0])[0]
        config = PruneConfig(target_sparsity=0.5)
        pruned, record = putri.pruning.prune_ffn_layer(self.model, 0, z, 20, config)
        self.assertEqual(20, len(record.kept))
        self.assertEqual(record.kept, pruned.layers[0].ff_nodes)
        self.assertLessEqual(record.residual_after, record.residual_before * (1 + 1e-6) + 1e-6)
        self.assertLess(record.residual_after, record.residual_before)

        # Largest activation norms survive
        norms = putri.score_ffn_nodes(z)
        weakest_kept = min(float(norms[i]) for i in record.kept)
        strongest_dropped = max(float(norms[i]) for i in range(64) if i not in record.kept)
        self.assertGreaterEqual(weakest_kept, strongest_dropped)

    def test_no_update_slices(self):
        z = putri.pruning.collect_taps(self.model, self.calib, [1])[1]
        config = PruneConfig(target_sparsity=0.5, no_ffn_update=True)
        pruned, record = putri.pruning.prune_ffn_layer(self.model, 1, z, 20, config)
        self.assertEqual(record.residual_before, record.residual_after)
        index = list(record.kept)
        self.assertTrue(torch.equal(self.model.layers[1].down[index, :], pruned.layers[1].down))

    def test_sequential_and_parallel(self):
        allocation = allocate(PruneConfig(target_sparsity=0.5), self.model)
        for parallel in (False, True):
            config = PruneConfig(target_sparsity=0.5, parallel_update=parallel)
            pruned, records = putri.prune_ffn_sequential(self.model, self.calib, allocation, config)
            self.assertEqual(2, len(records))
            for layer in pruned.layers:
                self.assertEqual(allocation.keep_per_layer, layer.ff_live)
                self.assertEqual(2, layer.kv_live)

        # Layer 0 sees the same activations either way, later layers do not
        sequential, seq_records = putri.prune_ffn_sequential(
            self.model, self.calib, allocation, PruneConfig(target_sparsity=0.5)
        )
        parallel, par_records = putri.prune_ffn_sequential(
            self.model,
            self.calib,
            allocation,
            PruneConfig(target_sparsity=0.5, parallel_update=True),
        )
        self.assertTrue(torch.equal(sequential.layers[0].down, parallel.layers[0].down))
        self.assertNotEqual(seq_records[1].residual_before, par_records[1].residual_before)


class TestHeadPruning(unittest.TestCase):
    def allocation(self, model: putri.ToyTransformer, heads: int, layers: int = 0):
        ffn, attn = model.prunable_params()
        return SparsityAllocation(heads, layers, 0.0, model.config.d_ff, 0.0, ffn, attn)

    def test_matches_slice_oracle(self):
        config = PruneConfig(target_sparsity=0.5, heads_per_iteration=1, score_sequences=1)
        for seed in range(5):
            model = fixtures.random_model("tiny", seed=seed)
            calib = fixtures.calib(seed=seed, n_seqs=2)
            pruned, removed = prune_attention_heads(model, calib, self.allocation(model, 4), config)

            expected = [[] for _ in range(model.config.n_layers)]
            for layer, head in slice_oracle(model, calib.sequences[0], 4):
                expected[layer].append(head)
            self.assertEqual(expected, removed, seed)
            self.assertEqual(8 - 4, sum(layer.kv_live for layer in pruned.layers))

    def test_grouped_iterations(self):
        model = fixtures.random_model("tiny", seed=1)
        calib = fixtures.calib(n_seqs=2)
        config = PruneConfig(target_sparsity=0.5, heads_per_iteration=4)
        pruned, removed = prune_attention_heads(model, calib, self.allocation(model, 6), config)
        self.assertEqual(6, sum(len(r) for r in removed))
        self.assertEqual(2, sum(layer.kv_live for layer in pruned.layers))

    def test_full_attention_removes_blocks(self):
        model = fixtures.random_model("tiny", seed=2)
        calib = fixtures.calib(n_seqs=2)
        config = PruneConfig(target_sparsity=0.5, full_attention=True)
        pruned, removed = prune_attention_heads(model, calib, self.allocation(model, 4, 2), config)
        self.assertEqual([2, 2], sorted(len(r) for r in removed if r))
        self.assertEqual(2, sum(1 for layer in pruned.layers if layer.kv_live == 0))

    def test_zero_budget(self):
        model = fixtures.random_model("micro")
        pruned, removed = prune_attention_heads(
            model, fixtures.calib(n_seqs=1), self.allocation(model, 0), PruneConfig(0.5)
        )
        self.assertIs(model, pruned)
        self.assertEqual([[], []], removed)

    def test_budget_exceeds_live(self):
        model = fixtures.random_model("micro")
        with self.assertRaises(putri.InfeasibleTargetError):
            prune_attention_heads(
                model, fixtures.calib(n_seqs=1), self.allocation(model, 5), PruneConfig(0.5)
            )

    def test_workers_match_serial(self):
        model = fixtures.random_model("tiny", seed=3)
        calib = fixtures.calib(n_seqs=2)
        serial = prune_attention_heads(
            model, calib, self.allocation(model, 3), PruneConfig(0.5, heads_per_iteration=1)
        )[1]
        threaded = prune_attention_heads(
            model,
            calib,
            self.allocation(model, 3),
            PruneConfig(0.5, heads_per_iteration=1, workers=3),
        )[1]
        self.assertEqual(serial, threaded)


class TestPipeline(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = fixtures.random_model("tiny", seed=7)
        cls.calib = fixtures.calib(n_seqs=4)
        cls.eval = fixtures.heldout(n_seqs=4)

    def test_identity(self):
        pruned, report = putri.putri(self.model, self.calib, self.eval, PruneConfig(0.0))
        self.assertEqual(putri.digest(self.model), putri.digest(pruned))
        ppl = report.perplexity["eval"]
        self.assertEqual(ppl["before"].value, ppl["after"].value)
        self.assertEqual(0.0, report.achieved_sparsity)
        self.assertEqual([], report.reconstruction)

    def test_sparsity_accounting(self):
        config = self.model.config
        ffn, attn = self.model.prunable_params()
        total = ffn + attn
        bound = (config.n_layers * config.node_params + config.head_params) / total
        for s in (0.25, 0.5, 0.75, 0.9):
            pruned, report = putri.putri(self.model, self.calib, self.eval, PruneConfig(s))
            self.assertEqual("ok", report.status)
            self.assertLessEqual(abs(report.achieved_sparsity - s), bound, s)

            ffn_after, attn_after = removal_counts(report, config)
            self.assertEqual((ffn_after, attn_after), pruned.prunable_params())
            self.assertEqual((total - ffn_after - attn_after) / total, report.achieved_sparsity)
            self.assertEqual(
                report.allocation.predicted_achieved_sparsity, report.achieved_sparsity
            )
            self.assertEqual(
                report.allocation.n_kv_heads_to_remove,
                sum(len(r) for r in report.removed_kv_heads),
            )

    def test_report_contents(self):
        eval_sets = {"heldout": self.eval, "train": self.calib}
        _, report = putri.putri(
            self.model, self.calib, eval_sets, PruneConfig(0.5), provenance={"seed": 3}
        )
        self.assertEqual(["heldout", "train"], sorted(report.perplexity))
        self.assertEqual(4, len(report.reconstruction))
        self.assertEqual(3, report.provenance["seed"])
        self.assertEqual(self.calib.digest(), report.provenance["calib_digest"])
        self.assertEqual(self.model.prunable_params(), report.params_before)
        self.assertGreater(report.wall_clock_seconds, 0.0)

    def test_plain_mha_model(self):
        model = fixtures.random_model("micro", seed=3, ffn_kind="plain", n_kv_heads=4)
        calib = fixtures.calib(seq_len=32, n_seqs=2)
        pruned, report = putri.putri(model, calib, calib, PruneConfig(0.8))
        self.assertEqual("ok", report.status)
        self.assertGreater(report.allocation.n_kv_heads_to_remove, 0)
        self.assertIsNone(pruned.layers[0].gate)

    def test_vocab_mismatch(self):
        small = fixtures.random_model("micro", vocab_size=100)
        with self.assertRaises(putri.model.TokenError):
            putri.putri(small, self.calib, self.eval, PruneConfig(0.5))

    def test_ablation_runs_every_variant(self):
        model = fixtures.random_model("micro", seed=4)
        calib = fixtures.calib(seq_len=32, n_seqs=2)
        rows = putri.pruning.ablation_sweep(model, {0: calib}, calib, [0.5], PruneConfig(0.0))
        self.assertEqual(list(putri.pruning.ABLATION_VARIANTS), [row.variant for row in rows])
        for row in rows:
            self.assertIsNone(row.error, row.variant)
            self.assertIsNotNone(row.ppl, row.variant)
            self.assertGreater(row.achieved, 0.0, row.variant)

    def test_variant_flags(self):
        self.assertEqual(
            {"no_ffn_update": False, "parallel_update": False, "full_attention": False},
            putri.pruning.variant_flags("putri"),
        )
        self.assertEqual(
            {"no_ffn_update": False, "parallel_update": True, "full_attention": False},
            putri.pruning.variant_flags("parallel_update"),
        )
        with self.assertRaises(putri.ConfigError):
            putri.pruning.variant_flags("magic")

    def test_deterministic(self):
        a, report_a = putri.putri(self.model, self.calib, self.eval, PruneConfig(0.75))
        b, report_b = putri.putri(self.model, self.calib, self.eval, PruneConfig(0.75))
        self.assertEqual(putri.digest(a), putri.digest(b))
        self.assertEqual(
            putri.report.canonical_json(report_a), putri.report.canonical_json(report_b)
        )


class TestTrainedFixture(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = fixtures.trained_tiny()
        cls.eval = fixtures.heldout(n_seqs=8)

    def test_extreme_sparsity(self):
        pruned, report = putri.putri(
            self.model, fixtures.calib(n_seqs=4), self.eval, PruneConfig(0.95)
        )
        self.assertEqual("ok", report.status)
        self.assertEqual(2, pruned.layers[0].ff_live)
        after = report.perplexity["eval"]["after"]
        self.assertTrue(after.finite or after.value == math.inf)
        putri.report.canonical_json(report)

    def test_ablation_trend(self):
        calib_sets = {seed: fixtures.calib(seed=seed) for seed in range(5)}
        rows = putri.pruning.ablation_sweep(
            self.model, calib_sets, self.eval, [0.5, 0.75], PruneConfig(0.0), workers=2
        )
        self.assertEqual(4 * 2 * 5, len(rows))
        self.assertTrue(all(row.error is None for row in rows))

        for s in (0.5, 0.75):
            median = {
                variant: statistics.median(
                    row.ppl.value for row in rows if row.variant == variant and row.sparsity == s
                )
                for variant in putri.pruning.ABLATION_VARIANTS
            }
            self.assertLessEqual(median["putri"], median["no_ffn_update"], (s, median))
            self.assertLessEqual(
                median["putri"],
                1.05 * min(median["parallel_update"], median["full_attention"]),
                (s, median),
            )

    def test_ablation_rows(self):
        rows = putri.pruning.ablation_sweep(
            self.model,
            {0: fixtures.calib(n_seqs=2)},
            self.eval,
            [0.5, 0.999],
            PruneConfig(0.0),
            variants=["putri", "full_attention"],
        )
        self.assertEqual(
            [("putri", 0.5), ("putri", 0.999), ("full_attention", 0.5), ("full_attention", 0.999)],
            [(row.variant, row.sparsity) for row in rows],
        )
        self.assertIsNone(rows[0].error)
        self.assertIsNotNone(rows[1].error)
        self.assertIsNone(rows[1].ppl)
        with self.assertRaises(putri.ConfigError):
            putri.pruning.ablation_sweep(
                self.model, {}, self.eval, [0.5], PruneConfig(0.0), ["magic"]
            )


if __name__ == "__main__":
    unittest.main()

"""Target model: cache consistency, tree-masked attention, sampling, cache surgery."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from amphista import tensor as T
from amphista.model import ModelConfig, TargetModel, sample
from amphista.speculation import TreeTopology, build_mask, preset_topology
from amphista.tensor import DimensionError

from conftest import TINY_MODEL, make_tiny_model


def uncached_logits(model, tokens):
    cache = model.new_cache()
    with T.no_grad():
        return model.forward(tokens, cache).logits.data


class TestForward:
    def test_prefill_then_step_matches_uncached(self):
        model = make_tiny_model()
        tokens = list(np.random.default_rng(0).integers(0, 24, size=11))
        cache = model.new_cache()
        with T.no_grad():
            model.forward(tokens[:10], cache)
            step = model.forward(tokens[10:], cache)
        full = uncached_logits(model, tokens)
        assert np.abs(step.logits.data[-1] - full[-1]).max() <= 1e-5

    @given(st.integers(1, 11))
    def test_cache_consistency_any_split(self, split):
        model = make_tiny_model()
        tokens = list(np.random.default_rng(1).integers(0, 24, size=12))
        cache = model.new_cache()
        with T.no_grad():
            model.forward(tokens[:split], cache)
            out = model.forward(tokens[split:], cache)
        full = uncached_logits(model, tokens)
        assert np.abs(out.logits.data - full[split:]).max() <= 1e-5

    def test_chain_mask_equals_sequential(self):
        model = make_tiny_model()
        prompt = [1, 2, 3]
        chain_tokens = [9, 5, 6, 7, 8]  # root + 4 chained drafts
        topo = preset_topology("chain")
        mask = build_mask(topo)
        assert mask.sum() == np.tril(np.ones((5, 5))).sum()

        seq_cache = model.new_cache()
        with T.no_grad():
            model.forward(prompt, seq_cache)
            seq_rows = [
                model.forward([tok], seq_cache).logits.data[0] for tok in chain_tokens
            ]

        tree_cache = model.new_cache()
        with T.no_grad():
            model.forward(prompt, tree_cache)
            tout = model.forward(
                chain_tokens, tree_cache, mask=mask, positions=3 + np.arange(5)
            )
        assert np.abs(np.stack(seq_rows) - tout.logits.data).max() <= 1e-5

    def test_empty_tokens_error(self):
        model = make_tiny_model()
        with pytest.raises(DimensionError):
            model.forward([], model.new_cache())

    def test_max_seq_len_overflow(self):
        model = make_tiny_model()
        cache = model.new_cache()
        with pytest.raises(DimensionError):
            with T.no_grad():
                model.forward([0] * (TINY_MODEL.max_seq_len + 1), cache)

    def test_mask_needs_positions_and_square(self):
        model = make_tiny_model()
        cache = model.new_cache()
        mask = np.eye(3, dtype=bool)
        with pytest.raises(DimensionError):
            model.forward([1, 2, 3], cache, mask=mask)  # no positions
        with pytest.raises(DimensionError):
            model.forward([1, 2], cache, mask=mask, positions=[0, 1])

    def test_determinism_bit_identical(self):
        a = uncached_logits(make_tiny_model(seed=5), [1, 2, 3, 4])
        b = uncached_logits(make_tiny_model(seed=5), [1, 2, 3, 4])
        assert a.tobytes() == b.tobytes()

    def test_forward_batch_matches_single(self):
        model = make_tiny_model()
        tokens = np.array([[1, 2, 3, 4, 5], [6, 7, 8, 9, 10]])
        with T.no_grad():
            batch = model.forward_batch(tokens)
        for b in range(2):
            single = uncached_logits(model, list(tokens[b]))
            assert np.abs(batch.logits.data[b] - single).max() <= 1e-10

    def test_logits_are_lm_head_of_hidden(self):
        model = make_tiny_model()
        with T.no_grad():
            out = model.forward([1, 2, 3], model.new_cache())
            recomputed = T.matmul(out.hidden, model.lm_head.weight)
        assert np.array_equal(recomputed.data, out.logits.data)


class TestSample:
    def test_argmax(self):
        assert sample(np.array([0.0, 5.0, 0.0]), 0.0) == 1

    def test_tie_break_lowest_index(self):
        assert sample(np.array([2.0, 2.0, 2.0]), 0.0) == 0

    def test_negative_temperature(self):
        with pytest.raises(ValueError):
            sample(np.array([0.0, 1.0]), -0.5)

    def test_categorical_frequencies_match_analytic(self):
        logits = np.array([0.0, np.log(3.0)])
        rng = np.random.default_rng(123)
        draws = sum(sample(logits, 1.0, rng) for _ in range(100_000))
        assert draws / 100_000 == pytest.approx(0.75, abs=0.01)


class TestCacheSurgery:
    def test_truncate_then_replay(self):
        model = make_tiny_model()
        cache = model.new_cache()
        with T.no_grad():
            model.forward([1, 2, 3], cache)
            model.forward([4, 5, 6, 7, 8], cache)
            cache.truncate(6)
            replay = model.forward([7, 8], cache)

            ref_cache = model.new_cache()
            model.forward([1, 2, 3], ref_cache)
            ref = model.forward([4, 5, 6, 7, 8], ref_cache)
        assert np.abs(replay.logits.data - ref.logits.data[-2:]).max() <= 1e-6

    def test_truncate_to_zero_equals_fresh(self):
        model = make_tiny_model()
        cache = model.new_cache()
        with T.no_grad():
            model.forward([1, 2, 3, 4], cache)
            cache.truncate(0)
            again = model.forward([1, 2, 3], cache)
        assert np.abs(again.logits.data - uncached_logits(model, [1, 2, 3])).max() == 0.0

    def test_truncate_noop_and_bounds(self):
        model = make_tiny_model()
        cache = model.new_cache()
        with T.no_grad():
            model.forward([1, 2, 3], cache)
        cache.truncate(3)
        assert cache.length == 3
        with pytest.raises(DimensionError):
            cache.truncate(4)

    def test_select_path_chain_equals_sequential_cache(self):
        model = make_tiny_model()
        topo = preset_topology("chain")
        tokens = [3, 4, 5, 6]

        tree_cache = model.new_cache()
        with T.no_grad():
            model.forward([1, 2], tree_cache)
            model.forward(
                [9] + tokens,
                tree_cache,
                mask=build_mask(topo),
                positions=2 + np.asarray([0, 1, 2, 3, 4]),
            )
        tree_cache.select_path(2, [0, 1, 2, 3, 4])
        assert tree_cache.length == 7

        seq_cache = model.new_cache()
        with T.no_grad():
            model.forward([1, 2], seq_cache)
            for tok in [9] + tokens:
                model.forward([tok], seq_cache)
        for lt, ls in zip(tree_cache.layers, seq_cache.layers):
            assert np.abs(lt.k - ls.k).max() <= 1e-6
            assert np.abs(lt.v - ls.v).max() <= 1e-6

    def test_select_root_only(self):
        model = make_tiny_model()
        topo = preset_topology("cart45")
        cache = model.new_cache()
        with T.no_grad():
            model.forward([1, 2, 3], cache)
            tokens = np.zeros(topo.node_count, dtype=np.int64)
            model.forward(
                tokens, cache, mask=build_mask(topo), positions=3 + np.asarray(topo.depth)
            )
        cache.select_path(3, [0])
        assert cache.length == 4

    def test_next_logits_after_select_match_sequential(self):
        model = make_tiny_model()
        rng = np.random.default_rng(7)
        prompt = [1, 2, 3, 4]
        topo = preset_topology("sparse22")
        tokens = rng.integers(0, 24, size=topo.node_count)

        cache = model.new_cache()
        with T.no_grad():
            model.forward(prompt, cache)
            model.forward(
                tokens, cache, mask=build_mask(topo), positions=4 + np.asarray(topo.depth)
            )
        # accept the path root -> first child -> its first child
        children = topo.children()
        path = [0, children[0][0], children[children[0][0]][0]]
        cache.select_path(4, path)
        with T.no_grad():
            after = model.forward([5], cache).logits.data[0]

        seq_cache = model.new_cache()
        with T.no_grad():
            model.forward(prompt, seq_cache)
            for node in path:
                model.forward([int(tokens[node])], seq_cache)
            ref = model.forward([5], seq_cache).logits.data[0]
        assert np.abs(after - ref).max() <= 1e-5

    def test_select_path_bad_offsets(self):
        model = make_tiny_model()
        cache = model.new_cache()
        with T.no_grad():
            model.forward([1, 2, 3, 4, 5], cache)
        with pytest.raises(ValueError):
            cache.select_path(2, [1, 1])
        with pytest.raises(DimensionError):
            cache.select_path(2, [0, 9])

# tests/test_models/test_transformer.py - Forward pass, run kinds and patching identities
import numpy as np
import pytest

from circuitlab.core import autodiff as ad
from circuitlab.core.errors import GraphError, PatchError, ShapeError
from circuitlab.models.transformer import (
    RunPlan,
    forward_logits,
    init_model,
    run,
    run_with_cache,
    run_with_edge_masks,
    run_with_edge_patch,
    run_with_head_pattern_patch,
    run_with_residual_add,
    run_with_residual_additions,
)
from circuitlab.schemas.config import ModelConfig

ATOL = 1e-10


def test_logit_shapes(tiny_params, tiny_config, tokens):
    batch, seq = tokens.shape
    assert run(tiny_params, tokens).shape == (batch, seq, tiny_config.vocab_size)
    assert run(tiny_params, tokens[0]).shape == (seq, tiny_config.vocab_size)


def test_init_is_deterministic(tiny_params, tiny_config):
    assert init_model(tiny_config).fingerprint() == tiny_params.fingerprint()
    other = init_model(tiny_config.model_copy(update={"seed": 1}))
    assert other.fingerprint() != tiny_params.fingerprint()


def test_token_validation(tiny_params, tiny_config, tokens):
    bad = tokens.copy()
    bad[0, 0] = tiny_config.vocab_size
    with pytest.raises(ShapeError):
        run(tiny_params, bad)
    with pytest.raises(ShapeError):
        run(tiny_params, np.zeros((1, tiny_config.max_seq_len + 1), dtype=int))
    with pytest.raises(ShapeError):
        run(tiny_params, np.zeros((1, 0), dtype=int))


def test_causality(tiny_params, tokens):
    changed = tokens.copy()
    changed[:, -1] = (changed[:, -1] + 1) % tiny_params.config.vocab_size
    before, after = run(tiny_params, tokens), run(tiny_params, changed)
    np.testing.assert_allclose(before[:, :-1], after[:, :-1], atol=ATOL)
    assert not np.allclose(before[:, -1], after[:, -1])


def test_empty_patch_is_identity(tiny_params, tokens):
    np.testing.assert_allclose(run_with_edge_patch(tiny_params, tokens, []), run(tiny_params, tokens), atol=ATOL)


def test_self_patching_every_edge_is_identity(tiny_params, tokens):
    logits, cache = run_with_cache(tiny_params, tokens)
    masks = np.ones((len(tiny_params.graph), tokens.shape[1]), dtype=bool)
    np.testing.assert_allclose(run_with_edge_masks(tiny_params, tokens, cache, masks), logits, atol=ATOL)


def test_patching_every_edge_from_clean_restores_clean(tiny_params, result_pairs):
    clean = np.array([p.clean_tokens for p in result_pairs[:2]])
    corrupt = np.array([p.corrupt_tokens for p in result_pairs[:2]])
    clean_logits, clean_cache = run_with_cache(tiny_params, clean)
    masks = np.ones((len(tiny_params.graph), clean.shape[1]), dtype=bool)
    patched = run_with_edge_masks(tiny_params, corrupt, clean_cache, masks)
    np.testing.assert_allclose(patched, clean_logits, atol=1e-8)


def test_single_edge_patch_moves_logits(tiny_params, result_pairs):
    pair = result_pairs[0]
    _, clean_cache = run_with_cache(tiny_params, pair.clean_tokens)
    position = len(pair.clean_tokens) - 1
    vector = clean_cache["embed"][0, position] * 0.0
    patched = run_with_edge_patch(tiny_params, pair.clean_tokens, [(("embed", "logits"), position, vector)])
    assert not np.allclose(patched[position], run(tiny_params, pair.clean_tokens)[position])
    with pytest.raises(GraphError):
        run_with_edge_patch(tiny_params, pair.clean_tokens, [(("A.1.0.O", "A.0.0.Q"), 0, vector)])


def test_own_pattern_at_alpha_one_is_identity(tiny_params, tokens):
    logits, cache = run_with_cache(tiny_params, tokens)
    patched = run_with_head_pattern_patch(tiny_params, tokens, [(0, 1), (1, 0)],
                                          [cache.pattern(0, 1), cache.pattern(1, 0)], 1.0)
    np.testing.assert_allclose(patched, logits, atol=ATOL)


def test_alpha_zero_silences_head(tiny_params, tokens):
    seq = tokens.shape[1]
    plan = RunPlan(pattern_patches={0: [(1, np.zeros((len(tokens), seq, seq)), 0.0)]})
    _, cache = run_with_cache(tiny_params, tokens, plan)
    np.testing.assert_array_equal(cache["blocks.0.head_out"][:, 1], 0.0)
    assert np.abs(cache["blocks.0.head_out"][:, 0]).max() > 0


def test_pattern_patch_validation(tiny_params, tokens):
    seq = tokens.shape[1]
    future = np.full((seq, seq), 1.0 / seq)
    with pytest.raises(PatchError):
        run_with_head_pattern_patch(tiny_params, tokens, [(0, 0)], [future], 1.0)
    causal = np.tril(np.ones((seq, seq))) / np.arange(1, seq + 1)[:, None]
    with pytest.raises(PatchError):
        run_with_head_pattern_patch(tiny_params, tokens, [(0, 0)], [causal], -0.5)
    with pytest.raises(GraphError):
        run_with_head_pattern_patch(tiny_params, tokens, [(2, 0)], [causal], 1.0)


def test_zero_residual_addition_is_identity(tiny_params, tiny_config, tokens):
    zero = np.zeros(tiny_config.d_model)
    patched = run_with_residual_additions(tiny_params, tokens, [(1, 2, zero)])
    np.testing.assert_allclose(patched, run(tiny_params, tokens), atol=ATOL)


def test_final_layer_addition_is_local(tiny_params, tiny_config, tokens):
    vector = np.ones(tiny_config.d_model)
    base = run(tiny_params, tokens)
    patched = run_with_residual_additions(tiny_params, tokens, [(tiny_config.n_layers, 2, vector)])
    others = [i for i in range(tokens.shape[1]) if i != 2]
    np.testing.assert_allclose(patched[:, others], base[:, others], atol=ATOL)
    assert not np.allclose(patched[:, 2], base[:, 2])


def test_residual_layer_range(tiny_params, tiny_config, tokens):
    with pytest.raises(GraphError):
        run_with_residual_additions(tiny_params, tokens, [(tiny_config.n_layers + 1, 0, np.zeros(tiny_config.d_model))])


def test_residual_add_with_zero_scale_is_identity(tiny_params, tokens):
    patched = run_with_residual_add(tiny_params, tokens, (2, 3), (0, 4), tokens, scale=0.0)
    np.testing.assert_allclose(patched, run(tiny_params, tokens), atol=ATOL)


def test_linear_mode_uses_uniform_attention(linear_params, tokens):
    _, cache = run_with_cache(linear_params, tokens)
    seq = tokens.shape[1]
    expected = np.tril(np.ones((seq, seq))) / np.arange(1, seq + 1)[:, None]
    np.testing.assert_allclose(cache.pattern(1, 1)[0], expected)


def test_same_site_additions_sum(tiny_params, tiny_config, tokens):
    rng = np.random.default_rng(3)
    u, v = rng.normal(size=(2, tiny_config.d_model))
    stacked = run_with_residual_additions(tiny_params, tokens, [(1, 4, u), (1, 4, v)])
    summed = run_with_residual_additions(tiny_params, tokens, [(1, 4, u + v)])
    np.testing.assert_allclose(stacked, summed, atol=ATOL)


def test_residual_additions_are_additive_on_linear_model(linear_params, tiny_config, tokens):
    rng = np.random.default_rng(4)
    u, v = rng.normal(size=(2, tiny_config.d_model))
    base = run(linear_params, tokens)
    first = run_with_residual_additions(linear_params, tokens, [(0, 2, u)]) - base
    second = run_with_residual_additions(linear_params, tokens, [(1, 5, v)]) - base
    both = run_with_residual_additions(linear_params, tokens, [(0, 2, u), (1, 5, v)]) - base
    np.testing.assert_allclose(both, first + second, atol=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_model_gradients_match_finite_differences(tokenizer, tokens, seed):
    config = ModelConfig(n_layers=2, n_heads=2, d_model=4, d_mlp=8, vocab_size=len(tokenizer), init_std=0.5, seed=seed)
    params = init_model(config)
    checked = [
        "embed.W_pos", "blocks.0.ln1.w", "blocks.0.attn.W_Q", "blocks.0.attn.W_K", "blocks.0.attn.W_O",
        "blocks.1.attn.W_V", "blocks.0.mlp.W_in", "blocks.1.mlp.b_in", "blocks.1.mlp.W_out",
        "blocks.1.ln2.w", "ln_final.w",
    ]
    fixed = {name: params[name] for name in params.names() if name not in checked}
    weights = np.random.default_rng(seed).normal(size=run(params, tokens).shape)

    def program(t):
        return {"metric": ad.sum_(ad.mul(forward_logits({**fixed, **t}, config, tokens), weights))}

    point = {name: params[name][: tokens.shape[1]] if name == "embed.W_pos" else params[name] for name in checked}
    assert ad.finite_difference_check(program, point, 1e-5) < 1e-4

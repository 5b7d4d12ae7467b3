"""Intent extraction: frozen backbone, learned single-query pooling, and the
once-per-episode usage contract."""

import math

import numpy as np
import pytest
import torch

from beliefbench.env import make_task, reset
from beliefbench.intent import FrozenMixer, IntentExtractor, UsageError, single_query_pool
from beliefbench.language import encode_instruction, instruction_for


def episode_inputs(seed=0):
    state, obs = reset(make_task("ppN"), seed)
    ids = torch.tensor(encode_instruction(instruction_for(state)), dtype=torch.long)
    return ids, torch.from_numpy(obs.image)


# --------------------------------------------------------------- pooling math


def test_single_query_pool_matches_manual():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(7, 6, generator=g, dtype=torch.float64)
    q = torch.randn(6, generator=g, dtype=torch.float64)
    w_k = torch.randn(6, 6, generator=g, dtype=torch.float64)
    out = single_query_pool(x, q, w_k)
    scores = np.array([q.numpy() @ (w_k.numpy() @ xi) for xi in x.numpy()]) / math.sqrt(6)
    e = np.exp(scores - scores.max())
    alpha = e / e.sum()
    assert np.allclose(out.numpy(), alpha @ x.numpy(), atol=1e-12)


def test_single_query_pool_batched():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(3, 7, 6, generator=g)
    q = torch.randn(6, generator=g)
    w_k = torch.eye(6)
    batched = single_query_pool(x, q, w_k)
    rows = torch.stack([single_query_pool(x[i], q, w_k) for i in range(3)])
    assert torch.allclose(batched, rows, atol=1e-6)


def test_pool_weights_sum_to_one(tiny_cfg):
    ext = IntentExtractor(tiny_cfg, master_seed=0)
    ids, img = episode_inputs()
    w = ext.pool_weights(ext.token_states(ids, img))
    assert w.shape == (len(ids) + 16,)
    assert w.sum().item() == pytest.approx(1.0, abs=1e-6)


# ------------------------------------------------------------ frozen backbone


def test_backbone_frozen_and_deterministic(tiny_cfg):
    m1 = FrozenMixer(tiny_cfg, master_seed=7)
    m2 = FrozenMixer(tiny_cfg, master_seed=7)
    m3 = FrozenMixer(tiny_cfg, master_seed=8)
    assert all(not p.requires_grad for p in m1.parameters())
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)
    assert any(
        not torch.equal(p1, p3) for p1, p3 in zip(m1.parameters(), m3.parameters())
    )


def test_backbone_token_layout(tiny_cfg):
    mixer = FrozenMixer(tiny_cfg, master_seed=0)
    ids, img = episode_inputs()
    x = mixer(ids, img)
    assert x.shape == (len(ids) + 16, tiny_cfg.d_vlm)


def test_backbone_input_validation(tiny_cfg):
    mixer = FrozenMixer(tiny_cfg, master_seed=0)
    _, img = episode_inputs()
    with pytest.raises(ValueError, match="non-empty"):
        mixer(torch.zeros(0, dtype=torch.long), img)
    with pytest.raises(ValueError, match="longer"):
        mixer(torch.ones(40, dtype=torch.long), img)
    with pytest.raises(ValueError, match="vocabulary"):
        mixer(torch.tensor([1, 99]), img)
    with pytest.raises(ValueError, match="image"):
        mixer(torch.tensor([1, 5]), torch.zeros(16, 16, 3))


def test_backbone_mixes_modalities(tiny_cfg):
    """Changing the image changes the language-token states too."""
    mixer = FrozenMixer(tiny_cfg, master_seed=0)
    ids, img = episode_inputs(0)
    _, img2 = episode_inputs(1)
    x1 = mixer(ids, img)
    x2 = mixer(ids, img2)
    assert not torch.allclose(x1[: len(ids)], x2[: len(ids)], atol=1e-5)


# ------------------------------------------------------------ episodic usage


def test_extract_once_then_error(tiny_cfg):
    ext = IntentExtractor(tiny_cfg, master_seed=0)
    ids, img = episode_inputs()
    ext.begin_episode()
    out = ext.extract(ids, img)
    assert out.shape == (tiny_cfg.d_i,)
    assert ext.calls == 1
    with pytest.raises(UsageError, match="already extracted"):
        ext.extract(ids, img)
    assert ext.calls == 1  # failed call not counted


def test_extract_replan_and_new_episode(tiny_cfg):
    ext = IntentExtractor(tiny_cfg, master_seed=0)
    ids, img = episode_inputs()
    ext.begin_episode()
    ext.extract(ids, img)
    ext.extract(ids, img, replan=True)  # explicit replan allowed
    assert ext.calls == 2
    ext.begin_episode()
    ext.extract(ids, img)
    assert ext.calls == 3


def test_episode_intent_property(tiny_cfg):
    ext = IntentExtractor(tiny_cfg, master_seed=0)
    ids, img = episode_inputs()
    ext.begin_episode()
    with pytest.raises(UsageError, match="no intent"):
        _ = ext.episode_intent
    out = ext.extract(ids, img)
    assert torch.allclose(ext.episode_intent, out.detach())


def test_intent_constant_within_episode(tiny_cfg):
    """The cached episode intent never changes between extraction calls, even
    if later observations differ."""
    ext = IntentExtractor(tiny_cfg, master_seed=0)
    ids, img = episode_inputs()
    ext.begin_episode()
    first = ext.extract(ids, img).detach().clone()
    for _ in range(5):
        assert torch.equal(ext.episode_intent, first)


# ----------------------------------------------------------------- training


def test_only_head_is_trainable(tiny_cfg):
    ext = IntentExtractor(tiny_cfg, master_seed=0)
    trainable = {id(p) for p in ext.trainable_parameters()}
    for name, p in ext.named_parameters():
        if name.startswith("backbone."):
            assert id(p) not in trainable
            assert not p.requires_grad
        else:
            assert id(p) in trainable


def test_gradients_flow_through_pooling(tiny_cfg):
    ext = IntentExtractor(tiny_cfg, master_seed=0)
    ids, img = episode_inputs()
    x = ext.token_states(ids, img)
    loss = ext.pool_project(x).square().sum()
    loss.backward()
    assert ext.q.grad is not None and ext.q.grad.abs().sum() > 0
    assert ext.w_k.grad is not None
    assert all(p.grad is None for p in ext.backbone.parameters())


def test_intents_differ_across_instructions(tiny_cfg):
    ext = IntentExtractor(tiny_cfg, master_seed=0)
    _, img = episode_inputs()
    a = ext.pool_project(ext.token_states(torch.tensor(encode_instruction("place red")), img))
    b = ext.pool_project(ext.token_states(torch.tensor(encode_instruction("place blue")), img))
    assert not torch.allclose(a, b, atol=1e-5)

import numpy as np
import pytest
import torch

from triclust.model import (
    BackboneSpec,
    HeadSpec,
    assign_clusters,
    forward_online,
    forward_target,
    init_params,
    labels_from_probabilities,
    load_checkpoint,
    save_checkpoint,
)

D = torch.float64


def batch(n=4, res=8, seed=0):
    return torch.rand(n, 3, res, res, generator=torch.Generator().manual_seed(seed), dtype=D)


def test_target_starts_as_copy(tiny_nets):
    for xi, theta in tiny_nets.paired_tensors():
        assert torch.equal(xi, theta)
    assert not any(p.requires_grad for p in tiny_nets.target.parameters())
    assert not hasattr(tiny_nets.target, "predictor")


def test_init_is_seeded():
    spec = BackboneSpec(resolution=8, feature_dim=8, channels=(4, 4, 8))
    a = init_params(spec, 3, seed=1)
    b = init_params(spec, 3, seed=1)
    c = init_params(spec, 3, seed=2)
    sa, sb, sc = a.online.state_dict(), b.online.state_dict(), c.online.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


def test_init_does_not_touch_global_rng():
    torch.manual_seed(3)
    expected = torch.rand(1)
    torch.manual_seed(3)
    init_params(BackboneSpec(resolution=8, feature_dim=8, channels=(4, 4, 8)), 2, seed=0)
    assert torch.equal(torch.rand(1), expected)


def test_too_few_clusters():
    with pytest.raises(ValueError):
        init_params(BackboneSpec(), 1, seed=0)


def test_head_shapes():
    nets = init_params(BackboneSpec(), 5, seed=0)
    z, y, q = forward_online(nets.online, torch.rand(3, 3, 16, 16))
    assert z.shape == (3, 256) and y.shape == (3, 256) and q.shape == (3, 5)
    linears = [m for m in nets.online.cluster_head if isinstance(m, torch.nn.Linear)]
    assert len(linears) == 2 and linears[-1].out_features == 5


def test_online_rows_stochastic(tiny_nets):
    _, _, q = forward_online(tiny_nets.online, batch())
    assert (q.sum(1) - 1).abs().max() < 1e-6


def test_duplicate_rows_give_duplicate_outputs(tiny_nets):
    x = batch(2)
    x = torch.cat([x, x[:1]])
    z, y, q = forward_online(tiny_nets.online, x)
    assert torch.equal(z[0], z[2]) and torch.equal(y[0], y[2]) and torch.equal(q[0], q[2])


def test_split_batch_equivalence(tiny_nets):
    x = batch(2)
    full = forward_online(tiny_nets.online, x)
    parts = [forward_online(tiny_nets.online, x[i : i + 1]) for i in range(2)]
    for k in range(3):
        torch.testing.assert_close(full[k], torch.cat([p[k] for p in parts]), rtol=0, atol=1e-12)


def test_split_batch_equivalence_batchnorm_in_eval_mode():
    spec = BackboneSpec(resolution=8, feature_dim=8, channels=(4, 4, 8))
    nets = init_params(spec, 3, seed=0, heads=HeadSpec(hidden=16, out=8, cluster_hidden=16, norm="batch"), dtype=D)
    nets.online.eval()
    x = batch(2)
    full = forward_online(nets.online, x)
    parts = [forward_online(nets.online, x[i : i + 1]) for i in range(2)]
    for k in range(3):
        torch.testing.assert_close(full[k], torch.cat([p[k] for p in parts]), rtol=0, atol=1e-12)


def test_target_matches_online_after_init(tiny_nets):
    x = batch()
    z_o, _, q_o = forward_online(tiny_nets.online, x)
    z_t, q_t = forward_target(tiny_nets.target, x)
    assert torch.equal(z_o, z_t) and torch.equal(q_o, q_t)
    assert (q_t.sum(1) - 1).abs().max() < 1e-6


def test_target_outputs_carry_no_gradient(tiny_nets):
    x = batch()
    z_t, q_t = forward_target(tiny_nets.target, x)
    assert not z_t.requires_grad and not q_t.requires_grad
    _, y, q = forward_online(tiny_nets.online, x)
    ((y - z_t) ** 2).sum().add((q * q_t).sum()).backward()
    assert all(p.grad is None for p in tiny_nets.target.parameters())
    assert all(p.grad is not None for p in tiny_nets.online.parameters())


def test_weight_sharing_between_online_streams(tiny_nets):
    xa, xc = batch(seed=1), batch(seed=2)
    before = forward_online(tiny_nets.online, xc)[0]
    with torch.no_grad():
        for p in tiny_nets.online.parameters():
            p.add_(0.01)
    after_a = forward_online(tiny_nets.online, xa)[0]
    after_c = forward_online(tiny_nets.online, xc)[0]
    assert not torch.equal(before, after_c)
    assert after_a.shape == after_c.shape


def test_no_predictor_returns_projection(tiny_nets):
    z, y, _ = forward_online(tiny_nets.online, batch(), use_predictor=False)
    assert y is z


def test_resolution_checked(tiny_nets):
    with pytest.raises(ValueError):
        forward_online(tiny_nets.online, torch.rand(2, 3, 16, 16, dtype=D))
    with pytest.raises(ValueError):
        forward_target(tiny_nets.target, torch.rand(2, 3, 8, 7, dtype=D))


def test_argmax_and_ties():
    assert labels_from_probabilities(np.array([[0.1, 0.7, 0.2]])).tolist() == [1]
    assert labels_from_probabilities(np.array([[0.5, 0.5]])).tolist() == [0]
    assert labels_from_probabilities(np.array([[0.2, 0.4, 0.4]])).tolist() == [1]


def test_labels_invariant_under_monotone_logit_maps(gen):
    logits = torch.randn(20, 4, generator=gen, dtype=D)
    base = labels_from_probabilities(torch.softmax(logits, 1).numpy())
    for f in (lambda t: 3 * t + 1, torch.exp, lambda t: t**3, torch.atan):
        assert np.array_equal(labels_from_probabilities(torch.softmax(f(logits), 1).numpy()), base)


def test_assign_clusters_matches_target_argmax(tiny_nets):
    x = batch(10)
    _, q = forward_target(tiny_nets.target, x)
    labels = assign_clusters(tiny_nets.target, x, batch_size=3)
    assert np.array_equal(labels, q.argmax(1).numpy())
    assert labels.min() >= 0 and labels.max() < 3


def test_checkpoint_round_trip(tiny_nets, tmp_path):
    p1, p2 = tmp_path / "a.pt", tmp_path / "b.pt"
    save_checkpoint(p1, tiny_nets, {"epoch": 3})
    nets, payload = load_checkpoint(p1)
    assert payload["epoch"] == 3 and payload["n_clusters"] == 3
    save_checkpoint(p2, nets, {"epoch": 3})
    assert p1.read_bytes() == p2.read_bytes()
    x = batch()
    assert torch.equal(forward_online(nets.online, x)[2], forward_online(tiny_nets.online, x)[2])


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.pt"
    torch.save({"hello": 1}, p)
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_resnet34_shaped_backbone():
    spec = BackboneSpec(arch="resnet34-shaped", resolution=32, feature_dim=64)
    nets = init_params(spec, 4, seed=0)
    z, y, q = forward_online(nets.online, torch.rand(2, 3, 32, 32))
    assert z.shape == (2, 256) and q.shape == (2, 4)

import math

import numpy as np
import pytest
import torch

import oracles
from condadapt.adversarial import (DiscriminatorBank, condition_adv_loss, discriminator_step,
                                   domain_adv_loss, masked_ce, select_branch, source_ce_loss,
                                   stage1_train)
from condadapt.blocks import PatchDiscriminator, poly_lr_factor
from condadapt.segnet import PredictionBundle, attention_fuse, build_segmenter
from condadapt.toyworld import ManifestData

L, K = 4, 3


def make_bundle(rng, b=2, h=8, w=8, l=L, k=K):
    feats = [torch.tensor(rng.normal(size=(b, 4, h, w)), dtype=torch.float32) for _ in range(k)]
    probs = [torch.tensor(oracles.random_simplex(rng, (b, h, w), l).transpose(1, 0, 2, 3),
                          dtype=torch.float32) for _ in range(k)]
    attn = torch.tensor(oracles.random_simplex(rng, (b, h, w), k).transpose(1, 0, 2, 3),
                        dtype=torch.float32)
    joint = torch.tensor(oracles.random_simplex(rng, (b, h, w), l).transpose(1, 0, 2, 3),
                         dtype=torch.float32)
    return PredictionBundle(feats, probs, attn, attention_fuse(feats, attn), feats[0], joint)


class ConstantDisc(torch.nn.Module):
    """Emits a fixed logit grid regardless of input."""

    def __init__(self, value: float, grid: int = 4):
        super().__init__()
        self.value = value
        self.grid = grid

    def forward(self, x):
        return torch.full((x.shape[0], 1, self.grid, self.grid), self.value, dtype=x.dtype)

    def score(self, x):
        return torch.sigmoid(self.forward(x))


def constant_bank(value: float, k: int = K) -> DiscriminatorBank:
    bank = DiscriminatorBank(L, k)
    bank.joint = ConstantDisc(value)
    bank.cond = torch.nn.ModuleList(ConstantDisc(value) for _ in range(k))
    return bank


def test_adv_loss_analytic_values():
    rng = np.random.default_rng(0)
    bundle = make_bundle(rng)
    conds = torch.tensor([0, 2])
    # outputs ~1 -> loss ~0
    assert float(condition_adv_loss(bundle, conds, constant_bank(20.0))) < 1e-4
    # outputs 0.5 -> two active terms of ln 2
    val = float(condition_adv_loss(bundle, conds, constant_bank(0.0)))
    assert abs(val - 2 * math.log(2)) < 1e-6


def test_adv_loss_masks_inactive_branches():
    rng = np.random.default_rng(1)
    bundle = make_bundle(rng)
    bank = DiscriminatorBank(L, K)
    conds = torch.tensor([2, 2])
    with torch.no_grad():
        joint_scores = bank.joint.score(bundle.joint_probs).numpy()
        branch_scores = [bank.cond[i].score(bundle.branch_probs[i]).numpy() for i in range(K)]
        got = float(condition_adv_loss(bundle, conds, bank))
    want = oracles.adv_alignment(joint_scores, branch_scores, conds.numpy())
    assert abs(got - want) < 1e-6


def test_adv_loss_rejects_bad_condition():
    rng = np.random.default_rng(2)
    bundle = make_bundle(rng)
    with pytest.raises(ValueError):
        condition_adv_loss(bundle, torch.tensor([0, K]), DiscriminatorBank(L, K))


def test_dat_loss_unmasked_and_degenerate_k1():
    rng = np.random.default_rng(3)
    # all outputs 0.5, K=3 -> 4 * ln 2
    bundle = make_bundle(rng)
    val = float(domain_adv_loss(bundle, constant_bank(0.0)))
    assert abs(val - 4 * math.log(2)) < 1e-6
    # K=1: masked and unmasked coincide
    bundle1 = make_bundle(rng, k=1)
    bank1 = DiscriminatorBank(L, 1)
    conds = torch.zeros(2, dtype=torch.long)
    with torch.no_grad():
        assert abs(float(domain_adv_loss(bundle1, bank1))
                   - float(condition_adv_loss(bundle1, conds, bank1))) < 1e-6


def test_dat_loss_matches_unmasked_oracle():
    rng = np.random.default_rng(4)
    bundle = make_bundle(rng)
    bank = DiscriminatorBank(L, K)
    with torch.no_grad():
        joint_scores = bank.joint.score(bundle.joint_probs).numpy()
        branch_scores = [bank.cond[i].score(bundle.branch_probs[i]).numpy() for i in range(K)]
        got = float(domain_adv_loss(bundle, bank))
    assert abs(got - oracles.adv_alignment_unmasked(joint_scores, branch_scores)) < 1e-6


def test_source_ce_analytic_values():
    b, h, w = 1, 4, 4
    labels = torch.randint(1, L + 1, (b, h, w))
    conds = torch.tensor([1])
    onehot = torch.zeros(b, L, h, w)
    onehot.scatter_(1, (labels - 1).unsqueeze(1), 1.0)
    bundle = PredictionBundle([onehot.clone() for _ in range(K)],
                              [onehot.clone() for _ in range(K)],
                              torch.full((b, K, h, w), 1.0 / K), onehot, onehot, onehot)
    assert float(source_ce_loss(bundle, labels, conds)) < 1e-5
    uniform = torch.full((b, L, h, w), 1.0 / 6)
    six = PredictionBundle([uniform] * K, [uniform] * K,
                           torch.full((b, K, h, w), 1.0 / K), uniform, uniform, uniform)
    assert abs(float(source_ce_loss(six, labels, conds)) - 2 * math.log(6)) < 1e-5


def test_source_ce_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        bundle = make_bundle(rng, b=2, h=5, w=5)
        labels = torch.tensor(rng.integers(0, L + 1, size=(2, 5, 5)))
        conds = torch.tensor(rng.integers(0, K, size=2))
        got = float(source_ce_loss(bundle, labels, conds))
        want = oracles.source_ce(bundle.joint_probs.numpy(),
                                 [p.numpy() for p in bundle.branch_probs],
                                 labels.numpy(), conds.numpy())
        assert abs(got - want) < 1e-6


def test_masked_ce_sum_reduction():
    rng = np.random.default_rng(6)
    probs = torch.tensor(oracles.random_simplex(rng, (1, 3, 3), L).transpose(1, 0, 2, 3))
    labels = torch.tensor(rng.integers(0, L + 1, size=(1, 3, 3)))
    n = int((labels > 0).sum())
    if n:
        assert abs(float(masked_ce(probs, labels, "sum"))
                   - n * float(masked_ce(probs, labels))) < 1e-5


def test_select_branch_gathers_per_sample():
    rng = np.random.default_rng(7)
    bundle = make_bundle(rng, b=3)
    conds = torch.tensor([2, 0, 1])
    sel = select_branch(bundle.branch_probs, conds)
    for b in range(3):
        assert torch.equal(sel[b], bundle.branch_probs[conds[b]][b])


def test_discriminator_overfits_separable_inputs():
    torch.manual_seed(0)
    disc = PatchDiscriminator(L)
    opt = torch.optim.Adam(disc.parameters(), lr=2e-3)
    src = torch.zeros(4, L, 8, 8)
    src[:, 0] = 1.0
    tgt = torch.zeros(4, L, 8, 8)
    tgt[:, 1] = 1.0
    for _ in range(200):
        opt.zero_grad()
        loss = torch.nn.functional.binary_cross_entropy_with_logits(
            disc(src), torch.ones(4, 1, 4, 4)) + torch.nn.functional.binary_cross_entropy_with_logits(
            disc(tgt), torch.zeros(4, 1, 4, 4))
        loss.backward()
        opt.step()
    assert float(loss) < 0.05
    # swapped labels on a now-confident discriminator blow the loss up
    swapped = torch.nn.functional.binary_cross_entropy_with_logits(
        disc(src), torch.zeros(4, 1, 4, 4)) + torch.nn.functional.binary_cross_entropy_with_logits(
        disc(tgt), torch.ones(4, 1, 4, 4))
    assert float(swapped) >= 5.0


def test_discriminator_step_skips_empty_buckets():
    rng = np.random.default_rng(8)
    bank = DiscriminatorBank(L, K)
    opt = torch.optim.Adam(bank.parameters(), lr=1e-3)
    bundle_s = make_bundle(rng)
    bundle_t = make_bundle(rng)
    losses = discriminator_step(bank, bundle_s.branch_probs, bundle_s.joint_probs,
                                torch.tensor([0, 0]), bundle_t.branch_probs,
                                bundle_t.joint_probs, torch.tensor([0, 1]), opt)
    assert "d_joint" in losses and "d_cond0" in losses
    assert "d_cond1" not in losses and "d_cond2" not in losses


def test_indicator_keeps_inactive_branch_discriminators_out_of_the_graph():
    rng = np.random.default_rng(9)
    model = build_segmenter("cam", L, K, feat_dim=8, enc_widths=(8, 8, 8))
    bank = DiscriminatorBank(L, K)
    x = torch.rand(2, 3, 32, 32)
    bundle = model(x)
    loss = condition_adv_loss(bundle, torch.tensor([1, 1]), bank)
    loss.backward()
    for i in range(K):
        grads = [p.grad for p in bank.cond[i].parameters() if p.grad is not None]
        total = sum(float(g.abs().sum()) for g in grads) if grads else 0.0
        assert (total > 0) == (i == 1)
    # and every branch decoder of the segmenter received gradient via its own path
    grads = [p.grad for p in model.branches[1].parameters() if p.grad is not None]
    assert any(float(g.abs().sum()) > 0 for g in grads)


def test_optimizer_isolation():
    rng = np.random.default_rng(10)
    model = build_segmenter("cam", L, K, feat_dim=8, enc_widths=(8, 8, 8))
    bank = DiscriminatorBank(L, K)
    from condadapt.blocks import param_checksum
    x = torch.rand(2, 3, 32, 32)
    labels = torch.randint(1, L + 1, (2, 32, 32))
    conds = torch.tensor([0, 1])
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    d_before = param_checksum(bank)
    loss = source_ce_loss(model(x), labels, conds) + 0.01 * condition_adv_loss(model(x), conds, bank)
    opt.zero_grad()
    loss.backward()
    opt.step()
    assert param_checksum(bank) == d_before  # generator step never moves D params


def test_poly_schedule():
    lr0 = 0.0025
    vals = [lr0 * poly_lr_factor(t, 100, 0.9) for t in range(101)]
    assert vals[0] == lr0
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 0.0


def test_stage1_smoke_and_determinism(tiny_dataset):
    root, cfg, manifests = tiny_dataset
    stylized = ManifestData(manifests["target_train"])  # stand-in with condition buckets
    target = ManifestData(manifests["target_train"])

    def run():
        torch.manual_seed(0)
        model = build_segmenter("cam", cfg.num_classes, cfg.num_conditions,
                                feat_dim=8, enc_widths=(8, 8, 8))
        bank = DiscriminatorBank(cfg.num_classes, cfg.num_conditions)
        stage1_train(model, bank, stylized, target, steps=6, batch_size=4, seed=1)
        return torch.cat([p.flatten() for p in model.parameters()])

    a, b = run(), run()
    assert torch.equal(a, b)


def test_stage1_lambda_zero_never_touches_discriminators(tiny_dataset):
    from condadapt.blocks import param_checksum
    root, cfg, manifests = tiny_dataset
    stylized = ManifestData(manifests["source_train"])
    model = build_segmenter("mix", cfg.num_classes, cfg.num_conditions,
                            feat_dim=8, enc_widths=(8, 8, 8))
    bank = DiscriminatorBank(cfg.num_classes, 0, with_joint=True)
    before = param_checksum(bank)
    stage1_train(model, bank, stylized, None, steps=4, batch_size=4, seed=2, lambda_adv=0.0)
    assert param_checksum(bank) == before

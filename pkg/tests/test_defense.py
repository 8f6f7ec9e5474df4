"""Input-space defenses, latent-constraint losses, adversarial training."""

import numpy as np
import pytest

from pc_advkit.attack import AttackConfig
from pc_advkit.defense import (
    AdvTrainConfig,
    DefenseConfig,
    adversarial_train,
    inter_class_loss,
    intra_class_loss,
    noise_along_normal,
    sor,
    srs,
)
from pc_advkit.errors import InvalidInputError, InvalidStateError
from pc_advkit.geometry import PointCloud
from pc_advkit.nn import build_classifier, forward, train_classifier


def cloud(seed=0, n=30, label=0):
    return PointCloud(np.random.default_rng(seed).normal(size=(n, 3)), label=label)


def rows_set(pts):
    return {tuple(p) for p in pts}


class TestSrs:
    def test_keep_all_is_permutation(self):
        c = cloud(0, n=40)
        out = srs(c, 1.0, seed=1)
        assert out.n == 40
        assert rows_set(out.points) == rows_set(c.points)

    def test_half_subset(self):
        c = cloud(1, n=100)
        out = srs(c, 0.5, seed=2)
        assert out.n == 50
        assert rows_set(out.points) <= rows_set(c.points)
        assert len(rows_set(out.points)) == 50  # no replacement

    def test_deterministic(self):
        c = cloud(2, n=64)
        np.testing.assert_array_equal(srs(c, 0.7, seed=5).points, srs(c, 0.7, seed=5).points)

    def test_normals_follow_points(self):
        pts = np.random.default_rng(3).normal(size=(20, 3))
        normals = np.tile(np.eye(3)[0], (20, 1))
        normals[10:] = np.eye(3)[2]
        c = PointCloud(pts, normals, label=1)
        out = srs(c, 0.5, seed=0)
        pairing = {tuple(p): tuple(u) for p, u in zip(pts, normals)}
        for p, u in zip(out.points, out.normals):
            assert pairing[tuple(p)] == tuple(u)
        assert out.label == 1

    def test_bad_keep(self):
        c = cloud(4)
        for keep in (0.0, -0.1, 1.5):
            with pytest.raises(InvalidInputError):
                srs(c, keep)
        with pytest.raises(InvalidInputError):
            srs(cloud(5, n=100), 0.001)  # rounds to zero points


def grid_cloud(m=5, spacing=1.0):
    ax = np.arange(m) * spacing
    gx, gy = np.meshgrid(ax, ax)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(m * m)])
    return PointCloud(pts, label=0)


class TestSor:
    def test_uniform_grid_untouched(self):
        # Interior spacing varies but a square grid's mean-kNN stats are
        # tight enough that nothing clears mean + 1.1 std.
        c = grid_cloud(5)
        out = sor(c, k=2, std_mult=1.1)
        np.testing.assert_array_equal(out.points, c.points)

    def test_hand_placed_outlier_removed(self):
        pts = np.vstack([grid_cloud(5).points, [[50.0, 50.0, 0.0]]])
        out = sor(PointCloud(pts, label=2), k=2, std_mult=1.1)
        assert out.n == 25
        np.testing.assert_array_equal(out.points, pts[:25])
        assert out.label == 2

    def test_subsequence_contract(self):
        c = cloud(6, n=50)
        out = sor(c, k=3, std_mult=0.5)
        assert 0 < out.n <= 50
        src = [tuple(p) for p in c.points]
        positions = [src.index(tuple(p)) for p in out.points]
        assert positions == sorted(positions)  # order preserved, bit-identical rows

    def test_matches_independent_recomputation(self):
        for seed in range(4):
            c = cloud(seed + 10, n=40)
            k = 3
            d = np.sqrt(((c.points[:, None, :] - c.points[None, :, :]) ** 2).sum(axis=2))
            np.fill_diagonal(d, np.inf)
            mean_d = np.sort(d, axis=1)[:, :k].mean(axis=1)
            keep = mean_d <= mean_d.mean() + 1.1 * mean_d.std()
            out = sor(c, k=k, std_mult=1.1)
            np.testing.assert_array_equal(out.points, c.points[keep])

    def test_all_removed_raises(self):
        with pytest.raises(InvalidStateError):
            sor(cloud(7, n=20), k=2, std_mult=-10.0)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            sor(cloud(8), k=0)
        with pytest.raises(InvalidInputError):
            sor(PointCloud(np.zeros((1, 3))), k=2)


class TestNoiseAlongNormal:
    def test_zero_sigma_identity(self):
        c = cloud(9)
        out = noise_along_normal(c, 0.0, seed=3)
        np.testing.assert_array_equal(out.points, c.points)

    def test_plane_displaces_only_z(self):
        rng = np.random.default_rng(10)
        pts = np.column_stack([rng.uniform(-1, 1, size=(200, 2)), np.zeros(200)])
        out = noise_along_normal(PointCloud(pts), 0.02, k=10, seed=4)
        diff = out.points - pts
        assert np.abs(diff[:, :2]).max() < 1e-6
        assert np.abs(diff[:, 2]).max() > 0

    def test_sampled_scale_statistics(self):
        # Recover the per-point draws g from the displacement; their std
        # must sit within 5% of sigma_frac over 10^4 points.
        n, sigma = 10_000, 0.02
        pts = np.random.default_rng(11).normal(size=(n, 3))
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        c = PointCloud(pts, normals)
        out = noise_along_normal(c, sigma, seed=12)
        centered = pts - pts.mean(axis=0)
        radius = np.sqrt((centered**2).sum(axis=1)).max()
        g = (out.points - pts)[:, 2] / radius
        assert abs(g.std() - sigma) / sigma < 0.05

    def test_uses_carried_normals(self):
        pts = np.random.default_rng(13).normal(size=(30, 3))
        normals = np.tile([1.0, 0.0, 0.0], (30, 1))
        out = noise_along_normal(PointCloud(pts, normals), 0.05, seed=5)
        diff = out.points - pts
        assert np.abs(diff[:, 1:]).max() == 0.0

    def test_deterministic_and_validated(self):
        c = cloud(14)
        a = noise_along_normal(c, 0.03, seed=6)
        b = noise_along_normal(c, 0.03, seed=6)
        np.testing.assert_array_equal(a.points, b.points)
        with pytest.raises(InvalidInputError):
            noise_along_normal(c, -0.01)


class TestDefenseConfig:
    def test_defaults_valid(self):
        DefenseConfig().validate()

    def test_entries_cover_all_kinds(self):
        entries = DefenseConfig(srs_keep=0.8, sor_k=4, noise_sigma_frac=0.02).entries()
        by_kind = {e["kind"]: e for e in entries}
        assert set(by_kind) == {"srs", "sor", "noise"}
        assert by_kind["srs"]["keep"] == 0.8
        assert by_kind["sor"]["k"] == 4
        assert by_kind["noise"]["sigma_frac"] == 0.02

    def test_invariants(self):
        for bad in (
            DefenseConfig(srs_keep=0.0),
            DefenseConfig(srs_keep=1.2),
            DefenseConfig(sor_k=0),
            DefenseConfig(sor_std_mult=0.0),
            DefenseConfig(noise_sigma_frac=-0.1),
        ):
            with pytest.raises(InvalidInputError):
                bad.validate()


# ---------------------------------------------------------------------------
# Latent-constraint losses


@pytest.fixture(scope="module")
def small_model():
    return build_classifier("arch-A", 3, seed=7)


def latent(model, c):
    return forward(model, c)[1]


def encoder_slots(model):
    return 2 * len(model.encoder)


class TestIntraClassLoss:
    def test_identical_features_zero(self, small_model):
        c = cloud(20, label=1)
        loss, grads = intra_class_loss(small_model, c, c, [c, c])
        assert loss == 0.0
        assert all(np.abs(g).max() == 0.0 for g in grads)

    def test_nonnegative(self, small_model):
        for seed in range(5):
            anchor = cloud(seed, label=0)
            adv = cloud(seed + 50, label=0)
            batch = [cloud(seed + 100, label=0), cloud(seed + 150, label=0)]
            loss, _ = intra_class_loss(small_model, anchor, adv, batch)
            assert loss >= 0.0

    def test_formula_oracle(self, small_model):
        anchor = cloud(21, label=2)
        adv = cloud(22, label=2)
        batch = [cloud(23, label=2), cloud(24, label=2), cloud(25, label=2)]
        w1, w2 = 0.7, 1.3
        loss, _ = intra_class_loss(small_model, anchor, adv, batch, omega1=w1, omega2=w2)
        lp = latent(small_model, anchor)
        want = w1 * np.linalg.norm(lp - latent(small_model, adv))
        want += w2 / 3 * sum(np.linalg.norm(lp - latent(small_model, b)) for b in batch)
        assert abs(loss - want) < 1e-12

    def test_batch_order_invariant(self, small_model):
        anchor, adv = cloud(26, label=0), cloud(27, label=0)
        batch = [cloud(28, label=0), cloud(29, label=0)]
        l1, g1 = intra_class_loss(small_model, anchor, adv, batch)
        l2, g2 = intra_class_loss(small_model, anchor, adv, batch[::-1])
        assert l1 == l2
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_only_encoder_gradients(self, small_model):
        loss, grads = intra_class_loss(
            small_model, cloud(30, label=0), cloud(31, label=0), [cloud(32, label=0)]
        )
        ne = encoder_slots(small_model)
        assert any(np.abs(g).max() > 0 for g in grads[:ne])
        assert all(np.abs(g).max() == 0.0 for g in grads[ne:])

    def test_validation(self, small_model):
        anchor = cloud(33, label=0)
        with pytest.raises(InvalidInputError):
            intra_class_loss(small_model, anchor, anchor, [])
        with pytest.raises(InvalidInputError):
            intra_class_loss(small_model, anchor, anchor, [cloud(34, label=1)])

    def test_directional_finite_difference(self, small_model):
        anchor, adv = cloud(35, label=1), cloud(36, label=1)
        batch = [cloud(37, label=1), cloud(38, label=1)]
        params = small_model.parameters()
        rng = np.random.default_rng(40)
        checked = 0
        for probe in range(6):
            direction = [rng.normal(size=p.shape) for p in params]
            norm = np.sqrt(sum((d * d).sum() for d in direction))
            direction = [d / norm for d in direction]  # unit step tames curvature noise

            def at(eps):
                for p, d in zip(params, direction):
                    p += eps * d
                val, _ = intra_class_loss(small_model, anchor, adv, batch)
                for p, d in zip(params, direction):
                    p -= eps * d
                return val

            base, grads = intra_class_loss(small_model, anchor, adv, batch)
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
            h = 1e-6
            up, dn = at(h), at(-h)
            left = (base - dn) / h
            right = (up - base) / h
            if abs(left - right) > 1e-5 * max(1.0, abs(left)):  # relu/norm kink
                continue
            fd = (up - dn) / (2 * h)
            assert abs(fd - analytic) <= 1e-4 * max(1.0, abs(fd))
            checked += 1
        assert checked >= 3


class TestInterClassLoss:
    def batches(self, anchor_label=0):
        return {
            1: [cloud(60, label=1), cloud(61, label=1)],
            2: [cloud(62, label=2), cloud(63, label=2)],
        }

    def test_degenerate_encoder_zero(self):
        model = build_classifier("arch-A", 3, seed=0)
        for layer in model.encoder:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
        anchor = cloud(64, label=0)
        loss, grads = inter_class_loss(model, anchor, {1: cloud(65, label=0)}, self.batches())
        assert loss == 0.0

    def test_nonpositive(self, small_model):
        anchor = cloud(66, label=0)
        advs = {1: cloud(67, label=0), 2: cloud(68, label=0)}
        loss, _ = inter_class_loss(small_model, anchor, advs, self.batches())
        assert loss <= 0.0

    def test_formula_oracle(self, small_model):
        anchor = cloud(69, label=0)
        advs = {1: cloud(70, label=0)}
        batches = self.batches()
        w3, w4 = 0.9, 1.4
        loss, _ = inter_class_loss(
            small_model, anchor, advs, batches, omega3=w3, omega4=w4
        )
        lp = latent(small_model, anchor)
        scale = 1.0 / ((3 - 1) * 2)  # (C-1) * J
        want = 0.0
        for c, batch in batches.items():
            for other in batch:
                want -= w3 * scale * np.linalg.norm(lp - latent(small_model, other))
        ladv = latent(small_model, advs[1])
        for other in batches[1]:
            want -= w4 * scale * np.linalg.norm(ladv - latent(small_model, other))
        assert abs(loss - want) < 1e-12

    def test_batch_order_invariant(self, small_model):
        anchor = cloud(71, label=0)
        batches = self.batches()
        flipped = {c: batch[::-1] for c, batch in batches.items()}
        l1, g1 = inter_class_loss(small_model, anchor, {}, batches)
        l2, g2 = inter_class_loss(small_model, anchor, {}, flipped)
        assert l1 == l2
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_validation(self, small_model):
        anchor = cloud(72, label=0)
        with pytest.raises(InvalidInputError):
            inter_class_loss(small_model, anchor, {}, {})
        bad = {0: [cloud(73, label=0), cloud(74, label=0)]}  # anchor's own class
        with pytest.raises(InvalidInputError):
            inter_class_loss(small_model, anchor, {}, bad)
        uneven = {1: [cloud(75, label=1)], 2: [cloud(76, label=2), cloud(77, label=2)]}
        with pytest.raises(InvalidInputError):
            inter_class_loss(small_model, anchor, {}, uneven)
        mislabeled = {1: [cloud(78, label=2), cloud(79, label=1)]}
        with pytest.raises(InvalidInputError):
            inter_class_loss(small_model, anchor, {}, mislabeled)
        with pytest.raises(InvalidInputError):
            inter_class_loss(small_model, anchor, {0: cloud(80, label=0)}, self.batches())
        with pytest.raises(InvalidInputError):
            inter_class_loss(small_model, anchor, {3: cloud(81, label=0)}, self.batches())

    def test_directional_finite_difference(self, small_model):
        anchor = cloud(82, label=0)
        advs = {1: cloud(83, label=0), 2: cloud(84, label=0)}
        batches = self.batches()
        params = small_model.parameters()
        rng = np.random.default_rng(85)
        checked = 0
        for probe in range(6):
            direction = [rng.normal(size=p.shape) for p in params]
            norm = np.sqrt(sum((d * d).sum() for d in direction))
            direction = [d / norm for d in direction]

            def at(eps):
                for p, d in zip(params, direction):
                    p += eps * d
                val, _ = inter_class_loss(small_model, anchor, advs, batches)
                for p, d in zip(params, direction):
                    p -= eps * d
                return val

            base, grads = inter_class_loss(small_model, anchor, advs, batches)
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
            h = 1e-6
            up, dn = at(h), at(-h)
            left = (base - dn) / h
            right = (up - base) / h
            if abs(left - right) > 1e-5 * max(1.0, abs(left)):
                continue
            fd = (up - dn) / (2 * h)
            assert abs(fd - analytic) <= 1e-4 * max(1.0, abs(fd))
            checked += 1
        assert checked >= 3


# ---------------------------------------------------------------------------
# Adversarial training


def blob_data(seed, per=8, n=24, classes=2):
    rng = np.random.default_rng(seed)
    centers = [1.5, -1.5, 0.0][:classes]
    out = []
    for label, cx in enumerate(centers):
        for _ in range(per):
            pts = rng.normal(scale=0.4, size=(n, 3))
            pts[:, 0] += cx
            out.append(PointCloud(pts, label=label))
    return out


def cheap_attack():
    return AttackConfig(target_class=0, bound_B=0.05, iterations=4)


class TestAdvTrainConfig:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            AdvTrainConfig(J=0).validate()
        with pytest.raises(InvalidInputError):
            AdvTrainConfig(inter_targets=4).validate()
        with pytest.raises(InvalidInputError):
            AdvTrainConfig(omega3=-1.0).validate()
        with pytest.raises(InvalidInputError):
            AdvTrainConfig(batch_size=1).validate()
        with pytest.raises(InvalidInputError):
            AdvTrainConfig(omega5=0.1, inner_attack=None).validate()
        AdvTrainConfig(omega5=0.0, omega6=0.0, inner_attack=None).validate()
        AdvTrainConfig(inner_attack=cheap_attack()).validate()


class TestAdversarialTrain:
    def test_degenerate_matches_plain_training(self):
        data = blob_data(0)
        cfg = AdvTrainConfig(
            omega5=0.0, omega6=0.0, inner_attack=None, epochs=5, batch_size=8, lr=0.01, seed=3
        )
        trace_a, trace_b = [], []
        hardened = adversarial_train(build_classifier("arch-A", 2, seed=1), data, cfg, trace_a)
        plain, _ = train_classifier(
            build_classifier("arch-A", 2, seed=1), data, 5, 3, lr=0.01, batch_size=8,
            loss_trace=trace_b,
        )
        for p, q in zip(hardened.parameters(), plain.parameters()):
            np.testing.assert_array_equal(p, q)
        assert trace_a == trace_b

    def test_constrained_run_deterministic(self):
        data = blob_data(1, per=4)
        cfg = AdvTrainConfig(
            inner_attack=cheap_attack(), epochs=1, batch_size=4, J=2, seed=5
        )
        m1 = adversarial_train(build_classifier("arch-A", 2, seed=2), data, cfg)
        m2 = adversarial_train(build_classifier("arch-A", 2, seed=2), data, cfg)
        for p, q in zip(m1.parameters(), m2.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_constraints_change_the_outcome(self):
        data = blob_data(2, per=4)
        base_cfg = AdvTrainConfig(
            omega5=0.0, omega6=0.0, inner_attack=cheap_attack(), epochs=1, batch_size=4, seed=6
        )
        con_cfg = AdvTrainConfig(
            inner_attack=cheap_attack(), epochs=1, batch_size=4, J=2, seed=6
        )
        vanilla = adversarial_train(build_classifier("arch-A", 2, seed=3), data, base_cfg)
        constrained = adversarial_train(build_classifier("arch-A", 2, seed=3), data, con_cfg)
        assert any(
            np.abs(p - q).max() > 0 for p, q in zip(vanilla.parameters(), constrained.parameters())
        )

    def test_small_class_rejected(self):
        data = blob_data(3, per=2)  # J+1 = 3 > 2 instances per class
        cfg = AdvTrainConfig(inner_attack=cheap_attack(), epochs=1, batch_size=4, J=2)
        with pytest.raises(InvalidInputError):
            adversarial_train(build_classifier("arch-A", 2, seed=4), data, cfg)
        with pytest.raises(InvalidInputError):
            adversarial_train(build_classifier("arch-A", 2, seed=4), [], cfg)

    def test_feature_statistics_move(self):
        # Hardening a pretrained model with the constraint losses tightens
        # same-class latent clusters and spreads different-class ones on
        # held-out clouds.  The inter push inflates the overall feature
        # scale without bound, so the fixture up-weights the intra pull to
        # keep the raw-distance trend visible.
        train = blob_data(4, per=6)
        held = blob_data(5, per=6)
        model, _ = train_classifier(build_classifier("arch-A", 2, seed=5), train, 30, seed=0)

        def stats(m):
            lats = [latent(m, c) for c in held]
            intra, inter, ni, nx = 0.0, 0.0, 0, 0
            for i in range(len(held)):
                for j in range(i + 1, len(held)):
                    d = np.linalg.norm(lats[i] - lats[j])
                    if held[i].label == held[j].label:
                        intra, ni = intra + d, ni + 1
                    else:
                        inter, nx = inter + d, nx + 1
            return intra / ni, inter / nx

        before_intra, before_inter = stats(model)
        cfg = AdvTrainConfig(
            omega5=2.0, inner_attack=cheap_attack(), epochs=8, batch_size=6, J=2, seed=7,
            lr=0.002,
        )
        hardened = adversarial_train(model, train, cfg)
        after_intra, after_inter = stats(hardened)
        assert after_intra < before_intra
        assert after_inter > before_inter

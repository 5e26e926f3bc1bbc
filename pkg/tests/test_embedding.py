import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imuloc import embedding as E
from imuloc import features as F
from imuloc import simulator as S
from imuloc.nn import DimensionError, Fragment, gradient_check


def small_model(seed, hidden=3, conv=2, channels=6, alpha=0.5, beta=0.2, kappa=1.0):
    m = E.EmbeddingModel(hidden, channels, conv, alpha, beta, kappa, seed=seed)
    rng = np.random.default_rng(seed + 100)
    # non-trivial standardisation so its gradients are exercised too
    for key, (mean, std) in list(m.stats.items()):
        m.stats[key] = (rng.normal(size=mean.shape) * 0.1, rng.uniform(0.5, 2.0, size=std.shape))
    return m


def fake_group(rng, n_people, T, parts_per_person=2, channels=6):
    """A PreparedGroup with random arrays (no WindowGroup behind it)."""
    owner = np.repeat(np.arange(n_people), parts_per_person)
    mask = np.ones((n_people, T), dtype=bool)
    mask[0, -1] = False
    return E.PreparedGroup(
        group=None, person_ids=list(range(n_people)),
        flows=rng.normal(size=(len(owner), T, 2)), owner=owner,
        pose=rng.normal(size=(n_people, T, 4)), box=rng.uniform(0.1, 0.5, size=(n_people, T, 2)),
        mask=mask, targets=list(range(n_people)),
        imu=rng.normal(size=(n_people, channels, 3 * T)))


# -- gradient checks ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_visual_encoder_gradients(seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed)
    pg = fake_group(rng, 2, 4)
    w = rng.normal(size=(len(pg.owner), 4, 3))
    keys = [k for k in m.params() if k.startswith(("f_of", "f_pose", "f_box"))]

    def loss():
        out, _ = m.visual_forward(pg.flows, pg.pose, pg.box, pg.mask, pg.owner)
        return float(np.sum(w * out))

    def loss_and_grads():
        out, cache = m.visual_forward(pg.flows, pg.pose, pg.box, pg.mask, pg.owner)
        return float(np.sum(w * out)), m.visual_backward(cache, w)

    rep = gradient_check(Fragment({k: m.params()[k] for k in keys}, loss, loss_and_grads))
    assert rep.passed, rep.errors


@pytest.mark.parametrize("seed", range(20))
def test_inertial_encoder_gradients(seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed)
    x = rng.normal(size=(2, 6, 12))
    w = rng.normal(size=(2, 4, 3))
    keys = [k for k in m.params() if k.startswith(("imu_conv", "f_imu"))]

    def loss():
        return float(np.sum(w * m.inertial_forward(x)[0]))

    def loss_and_grads():
        out, cache = m.inertial_forward(x)
        return float(np.sum(w * out)), m.inertial_backward(cache, w)

    rep = gradient_check(Fragment({k: m.params()[k] for k in keys}, loss, loss_and_grads))
    assert rep.passed, rep.errors


def triplet_fragment(m, prepared, pair_weight=0.0, seed=0):
    trip = E.build_triplets(prepared, np.random.default_rng(seed))
    return Fragment(
        m.params(),
        lambda: E.objective(m, prepared, trip, pair_weight),
        lambda: E.objective_and_grads(m, prepared, trip, pair_weight))


@pytest.mark.parametrize("seed", range(20))
def test_full_triplet_objective_gradients(seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed, kappa=3.0)
    prepared = [fake_group(rng, 2, 4), fake_group(rng, 3, 4, parts_per_person=1)]
    rep = gradient_check(triplet_fragment(m, prepared, seed=seed))
    assert set(rep.errors) == set(m.params())
    assert rep.passed, rep.errors


@pytest.mark.parametrize("seed", range(5))
def test_triplet_objective_gradients_with_pair_term(seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed, kappa=3.0)
    rep = gradient_check(triplet_fragment(m, [fake_group(rng, 2, 3)], pair_weight=1.0, seed=seed))
    assert rep.passed, rep.errors


@pytest.mark.parametrize("seed", range(3))
def test_triplet_gradients_other_representation(seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed, channels=9, kappa=3.0)
    rep = gradient_check(triplet_fragment(m, [fake_group(rng, 2, 3, channels=9)], seed=seed))
    assert rep.passed, rep.errors


def test_triplet_objective_against_hand_hinge():
    rng = np.random.default_rng(4)
    E_imu, E_pos, E_neg = rng.normal(size=(3, 5, 4, 3))
    mp = np.ones((5, 4))
    mn = np.ones((5, 4))
    mn[1, 2] = 0.0
    loss, *_ = E.triplet_objective(E_imu, E_pos, E_neg, mp, mn, 1.0)
    ref = []
    for i in range(5):
        dp = np.sqrt(sum((E_pos[i, t] - E_imu[i, t]) @ (E_pos[i, t] - E_imu[i, t])
                         for t in range(4)))
        dn = np.sqrt(sum((E_neg[i, t] - E_imu[i, t]) @ (E_neg[i, t] - E_imu[i, t])
                         for t in range(4) if mn[i, t]))
        ref.append(max(dp - dn + 1.0, 0.0))
    assert abs(loss - np.mean(ref)) < 1e-12


# -- encoders ---------------------------------------------------------------------

def tracks(rng, T, pid=0):
    return (F.PartTrack(pid, 0, rng.normal(size=(T, 2))),
            F.BoxTrack(pid, rng.uniform(50, 150, size=(T, 2))),
            F.KeypointTrack(pid, rng.normal(size=(T, 4)) * 20))


def test_visual_weights_zero_equals_flow_branch_bitwise():
    rng = np.random.default_rng(0)
    part, box, kp = tracks(rng, 20)
    m = E.EmbeddingModel(8, alpha=0.0, beta=0.0, seed=3)
    e = E.encode_visual(m, part, box, kp)
    ref, _ = m.f_of.forward(m._norm("of", part.flow[None], np.ones((1, 20))))
    assert np.array_equal(e.values, ref[0])


@pytest.mark.parametrize("weight,field", [("alpha", "keypoints"), ("beta", "box")])
def test_branch_off_ignores_its_input_bitwise(weight, field):
    rng = np.random.default_rng(1)
    part, box, kp = tracks(rng, 15)
    kw = {"alpha": 0.5, "beta": 0.2, weight: 0.0}
    m = E.EmbeddingModel(6, seed=2, **kw)
    e0 = E.encode_visual(m, part, box, kp)
    if field == "keypoints":
        kp = F.KeypointTrack(0, kp.points + rng.normal(size=kp.points.shape) * 50)
    else:
        box = F.BoxTrack(0, box.sizes * 3.0)
    e1 = E.encode_visual(m, part, box, kp)
    assert np.array_equal(e0.values, e1.values)


def test_branch_on_sees_its_input():
    rng = np.random.default_rng(1)
    part, box, kp = tracks(rng, 15)
    m = E.EmbeddingModel(6, seed=2)
    e0 = E.encode_visual(m, part, box, kp)
    e1 = E.encode_visual(m, part, box, F.KeypointTrack(0, kp.points + 30.0))
    assert not np.array_equal(e0.values, e1.values)


def test_zero_weight_model_zero_embedding():
    rng = np.random.default_rng(0)
    m = E.EmbeddingModel(5, seed=0)
    for v in m.params().values():
        v[...] = 0.0
    part, box, kp = tracks(rng, 10)
    assert np.all(E.encode_visual(m, part, box, kp).values == 0.0)
    imu = F.ImuWindow(0, rng.normal(size=(6, 30)), np.arange(30, dtype=np.int64))
    assert np.all(E.encode_inertial(m, imu, "a_w").values == 0.0)


def test_zero_imu_zero_bias_gives_zero_embedding():
    m = E.EmbeddingModel(5, seed=0)
    for k, v in m.params().items():
        if k.endswith(".b"):
            v[...] = 0.0
    imu = F.ImuWindow(0, np.zeros((6, 30)), np.arange(30, dtype=np.int64))
    assert np.all(E.encode_inertial(m, imu, "a_w").values == 0.0)


def test_inertial_length_150():
    st_ = S.generate_scene(2, 150, seed=3).imu[0]
    imu = F.resample_imu(st_, S.generate_scene(2, 150, seed=3).video_start_ns, 150)
    m = E.EmbeddingModel(seed=0)
    e = E.encode_inertial(m, imu)
    assert imu.samples.shape == (6, 450)
    assert e.values.shape == (150, 32)


def test_inertial_rejects_non_multiple_of_three():
    m = E.EmbeddingModel(4, seed=0)
    with pytest.raises(DimensionError):
        m.inertial_forward(np.zeros((1, 6, 31)))


def test_visual_length_mismatch():
    rng = np.random.default_rng(0)
    part, box, kp = tracks(rng, 10)
    with pytest.raises(DimensionError):
        E.encode_visual(E.EmbeddingModel(4), part, F.BoxTrack(0, box.sizes[:9]), kp)


def test_inertial_embedding_checksum():
    """Regression lock on a seeded model and input (recorded from the first verified run)."""
    m = E.EmbeddingModel(seed=11)
    x = np.random.default_rng(12).normal(size=(6, 60))
    e = E.encode_inertial(m, F.ImuWindow(0, x, np.arange(60, dtype=np.int64)), "a_w").values
    assert e.shape == (20, 32)
    assert abs(float(np.abs(e).sum()) - 35.77384619632662) < 1e-9
    np.testing.assert_allclose(e[-1, :3], [-0.04448840636103535, 0.12716859866877658,
                                           -0.060362361745840226], atol=1e-12)


@pytest.mark.parametrize("representation,channels", [("v_a_w", 9), ("a_w", 6), ("v_w", 6),
                                                     ("lpf", 6)])
def test_inertial_matrix_channels(representation, channels):
    imu = F.ImuWindow(0, np.random.default_rng(0).normal(size=(6, 300)),
                      np.arange(300, dtype=np.int64))
    assert E.inertial_matrix(imu, representation).shape == (channels, 300)


# -- distances and hinge ------------------------------------------------------------

def seq(values, mask=None):
    values = np.asarray(values, dtype=float)
    return E.EmbeddingSequence(values, np.ones(len(values), bool) if mask is None else mask)


def test_pair_distance_basics():
    a = np.random.default_rng(0).normal(size=(6, 4))
    assert E.pair_distance(seq(a), seq(a)) == 0.0
    b = a.copy()
    b[2, 3] += 1.0
    assert E.pair_distance(seq(a), seq(b)) == pytest.approx(1.0, abs=1e-15)


@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_pair_distance_flat_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 7, 5))
    mask = rng.random(7) < 0.7
    mask[0] = True
    flat = (a[mask] - b[mask]).ravel()
    assert abs(E.pair_distance(seq(a, mask), seq(b)) - float(np.sqrt(flat @ flat))) < 1e-12


def test_pair_distance_fully_masked():
    a = np.zeros((3, 2))
    with pytest.raises(E.DistanceError):
        E.pair_distance(seq(a, np.zeros(3, bool)), seq(a))


def test_triplet_equal_pos_neg_is_margin():
    rng = np.random.default_rng(0)
    m = E.EmbeddingModel(4, kappa=1.0)
    a, p = rng.normal(size=(2, 5, 4))
    assert E.triplet_loss(m, seq(a), seq(p), seq(p)) == 1.0


def test_triplet_inactive_hinge_is_zero():
    m = E.EmbeddingModel(4, kappa=1.0)
    a = np.zeros((5, 4))
    neg = np.zeros((5, 4))
    neg[0, 0] = 1.0     # d- = 1 = kappa
    assert E.triplet_loss(m, seq(a), seq(a), seq(neg)) == 0.0
    neg[0, 0] = 3.0
    assert E.triplet_loss(m, seq(a), seq(a), seq(neg)) == 0.0


@given(st.integers(0, 2**31), st.floats(0.1, 3.0))
@settings(max_examples=40, deadline=None)
def test_hinge_bounds(seed, kappa):
    rng = np.random.default_rng(seed)
    m = E.EmbeddingModel(3, kappa=kappa)
    a, p, n = (seq(x) for x in rng.normal(size=(3, 4, 3)))
    loss = E.triplet_loss(m, a, p, n)
    assert 0.0 <= loss <= kappa + E.pair_distance(p, a) + 1e-12


def test_swapping_satisfied_triplet():
    m = E.EmbeddingModel(2, kappa=1.0)
    a = np.zeros((3, 2))
    p = np.zeros((3, 2))
    n = np.zeros((3, 2))
    p[0, 0] = 0.5
    n[0, 0] = 2.0            # d- - d+ = 1.5 >= kappa
    assert E.triplet_loss(m, seq(a), seq(p), seq(n)) == 0.0
    swapped = E.triplet_loss(m, seq(a), seq(n), seq(p))
    assert swapped == pytest.approx(1.5 + 1.0)
    assert swapped >= 2 * m.kappa


# -- matching ---------------------------------------------------------------------------

def person(pid, T=10, n_parts=2, seed=0):
    rng = np.random.default_rng(seed + pid)
    parts = [F.PartTrack(pid, k, rng.normal(size=(T, 2))) for k in range(n_parts)]
    return F.PersonWindow(pid, parts, F.BoxTrack(pid, rng.uniform(50, 100, size=(T, 2))),
                          F.KeypointTrack(pid, rng.normal(size=(T, 4))), 0, np.ones(T, bool))


def query(T=10, seed=9):
    return F.ImuWindow(0, np.random.default_rng(seed).normal(size=(6, 3 * T)),
                       np.arange(3 * T, dtype=np.int64))


def test_match_single_candidate():
    r = E.match(E.EmbeddingModel(4), [person(5)], query())
    assert r.person_id == 5


def test_match_identical_embedding_wins(monkeypatch):
    H = 4
    q = np.ones((10, H))

    def fake_visual(model, part, box, kp, mask=None, image_height=389):
        vals = q if part.person_id == 2 else q + part.person_id + 1.0
        return E.EmbeddingSequence(vals, np.ones(10, bool))

    monkeypatch.setattr(E, "encode_visual", fake_visual)
    monkeypatch.setattr(E, "encode_inertial", lambda *a, **k: E.EmbeddingSequence(q, np.ones(10, bool)))
    r = E.match(E.EmbeddingModel(H), [person(0), person(2), person(3)], query())
    assert r.person_id == 2 and r.distances[2] == 0.0


def test_match_excludes_partless_candidates():
    empty = F.PersonWindow(1, [], F.BoxTrack(1, np.zeros((10, 2))),
                           F.KeypointTrack(1, np.zeros((10, 4))), 0, np.ones(10, bool))
    r = E.match(E.EmbeddingModel(4), [empty, person(3)], query())
    assert r.excluded == [1] and r.person_id == 3 and 1 not in r.distances


def test_match_ties_go_to_smallest_id():
    clone = person(4)
    twin = F.PersonWindow(2, [F.PartTrack(2, p.part_id, p.flow) for p in clone.parts],
                          F.BoxTrack(2, clone.box.sizes), F.KeypointTrack(2, clone.keypoints.points),
                          0, clone.mask)
    r = E.match(E.EmbeddingModel(4), [clone, twin], query())
    assert r.distances[2] == r.distances[4] and r.person_id == 2


@given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=6), st.floats(1e-3, 1e3))
def test_argmin_invariant_to_positive_scaling(dists, scale):
    ids = list(range(10, 10 + len(dists)))
    d = np.array(dists)
    assert E.argmin_person(d * scale, ids) == E.argmin_person(d, ids)


def test_match_requires_candidates():
    with pytest.raises(ValueError):
        E.match(E.EmbeddingModel(4), [], query())


def test_prepared_distances_agree_with_single_object_match():
    rec = S.generate_scene(3, 150, seed=21)
    g = S.segment_windows(rec, motion_threshold=0.0)[0]
    m = E.EmbeddingModel(8, seed=1)
    m.fit_stats([g])
    pg = E.prepare_group(g)
    D = E.candidate_distances(m, pg)
    for t, pid in enumerate(pg.targets):
        r = E.match(m, [g.persons[p] for p in pg.person_ids], g.imus[pid])
        np.testing.assert_allclose([r.distances[p] for p in pg.person_ids], D[t], rtol=1e-12)


# -- training ---------------------------------------------------------------------------

def two_person_windows(n_windows, window=60, seed0=500):
    groups = []
    seed = seed0
    while len(groups) < n_windows:
        rec = S.generate_scene(2, 300, seed, min_length=window)
        groups += S.segment_windows(rec, window=window)
        seed += 1
    return groups[:n_windows]


def test_zero_learning_rate_leaves_model_unchanged():
    groups = two_person_windows(6)
    m = E.EmbeddingModel(6, seed=0)
    m.fit_stats(groups)
    before = m.copy_params()
    E.train(m, [E.prepare_group(g) for g in groups], E.TrainConfig(lr=0.0, epochs=3))
    for k, v in m.params().items():
        assert np.array_equal(v, before[k])


def test_single_person_windows_counted_as_skipped():
    rec = S.generate_scene(1, 200, seed=3, behaviors=["walk"])
    groups = S.segment_windows(rec, window=60)
    m = E.EmbeddingModel(4, seed=0)
    _, rep = E.train(m, [E.prepare_group(g) for g in groups], E.TrainConfig(epochs=1))
    assert rep.skipped_single_person == sum(1 for g in groups if g.targets())
    assert rep.triplets_per_epoch == 0


def test_same_seed_bit_identical_checkpoints(tmp_path):
    groups = two_person_windows(8)
    paths = []
    for run in range(2):
        m = E.EmbeddingModel(6, seed=0)
        m.fit_stats(groups)
        E.train(m, [E.prepare_group(g) for g in groups], E.TrainConfig(epochs=2, seed=5))
        paths.append(tmp_path / f"m{run}.ckpt")
        m.save(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_two_person_training_reduces_triplet_loss():
    groups = two_person_windows(200)
    prepared = [E.prepare_group(g) for g in groups]
    m = E.EmbeddingModel(seed=0)
    m.fit_stats(groups)
    before = E.mean_triplet_loss(m, prepared)
    E.train(m, prepared, E.TrainConfig(epochs=2, seed=0))
    after = E.mean_triplet_loss(m, prepared)
    assert after < before


@pytest.mark.slow
def test_fixed_fixture_loss_halves_within_30_epochs():
    groups = []
    seed = 800
    while len(groups) < 50:
        rec = S.generate_scene(3, 300, seed)
        groups += [g for g in S.segment_windows(rec) if g.targets()]
        seed += 1
    prepared = [E.prepare_group(g) for g in groups[:50]]
    m = E.EmbeddingModel(seed=0)
    m.fit_stats(groups[:50])
    _, rep = E.train(m, prepared, E.TrainConfig(epochs=30))
    assert min(rep.loss_curve) <= 0.5 * rep.loss_curve[0]


def test_checkpoint_roundtrip_preserves_embeddings(tmp_path):
    rng = np.random.default_rng(0)
    m = small_model(3, hidden=5, conv=3)
    m.save(tmp_path / "m.ckpt")
    m2 = E.EmbeddingModel.load(tmp_path / "m.ckpt")
    pg = fake_group(rng, 2, 4)
    a, _ = m.visual_forward(pg.flows, pg.pose, pg.box, pg.mask, pg.owner)
    b, _ = m2.visual_forward(pg.flows, pg.pose, pg.box, pg.mask, pg.owner)
    assert np.array_equal(a, b)
    assert np.array_equal(m.inertial_forward(pg.imu)[0], m2.inertial_forward(pg.imu)[0])
    assert (m2.alpha, m2.beta, m2.kappa) == (m.alpha, m.beta, m.kappa)

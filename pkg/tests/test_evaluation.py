import numpy as np
import pytest
import torch

from faceslider.blendshape import (
    BlendshapeBasis,
    MeshVector,
    ParameterVector,
    write_basis,
)
from faceslider.engine import InferenceEngine
from faceslider.evaluation import (
    CONSISTENCY,
    VS_TRUTH,
    EvalReport,
    image_euclidean_distance,
    neutralize,
    regression_error_report,
    transfer_harness,
)
from faceslider.networks import (
    Discriminator,
    Generator,
    file_sha256,
    get_preset,
    save_checkpoint,
)
from faceslider.synth import generate_dataset, load_manifest


def ied_bruteforce(x, y, sigma=1.0):
    """O((HW)^2) double-sum oracle for the Gaussian-coupled distance."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    H, W, C = a.shape
    d = (a - b).reshape(H * W, C)
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    P = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    dist2 = ((P[:, None, :] - P[None, :, :]) ** 2).sum(-1)
    K = np.exp(-dist2 / (2.0 * sigma * sigma))
    return float(np.einsum("ij,ic,jc->", K, d, d) / (2 * np.pi))


class TestImageEuclideanDistance:
    def test_identical_images_zero(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (8, 8, 3))
        assert image_euclidean_distance(x, x) == 0.0

    def test_single_pixel_delta(self):
        x = np.zeros((8, 8))
        y = np.zeros((8, 8))
        delta = 0.37
        y[3, 4] = delta
        expected = delta**2 / (2 * np.pi)
        assert image_euclidean_distance(x, y) == pytest.approx(expected, rel=1e-9)
        assert ied_bruteforce(x, y) == pytest.approx(expected, rel=1e-9)

    def test_two_adjacent_pixels(self):
        x = np.zeros((8, 8))
        y = np.zeros((8, 8))
        delta = 0.5
        y[2, 2] = delta
        y[2, 3] = delta
        expected = (2 * delta**2 + 2 * np.exp(-0.5) * delta**2) / (2 * np.pi)
        got = image_euclidean_distance(x, y, sigma=1.0)
        assert got == pytest.approx(expected, rel=1e-9)
        assert ied_bruteforce(x, y) == pytest.approx(expected, rel=1e-9)

    def test_convolution_matches_bruteforce_8x8(self):
        rng = np.random.default_rng(7)
        for _ in range(12):
            x = rng.uniform(-1, 1, (8, 8, 3))
            y = rng.uniform(-1, 1, (8, 8, 3))
            fast = image_euclidean_distance(x, y)
            slow = ied_bruteforce(x, y)
            assert fast == pytest.approx(slow, rel=1e-6)

    def test_convolution_matches_bruteforce_other_sigma(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(-1, 1, (8, 8, 3))
        y = rng.uniform(-1, 1, (8, 8, 3))
        assert image_euclidean_distance(x, y, sigma=1.7) == pytest.approx(
            ied_bruteforce(x, y, sigma=1.7), rel=1e-6
        )

    def test_symmetry_and_nonnegativity_fuzz(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            x = rng.uniform(-1, 1, (8, 8, 3))
            y = rng.uniform(-1, 1, (8, 8, 3))
            dxy = image_euclidean_distance(x, y)
            dyx = image_euclidean_distance(y, x)
            assert abs(dxy - dyx) < 1e-9
            assert dxy >= -1e-12

    def test_validations(self):
        x = np.zeros((8, 8, 3))
        with pytest.raises(ValueError):
            image_euclidean_distance(x, np.zeros((7, 8, 3)))
        with pytest.raises(ValueError):
            image_euclidean_distance(x, x, sigma=0.0)


class FakeEngine:
    """Engine stub whose edit embeds the parameters into the image and
    whose regressor reads them back: a perfect generator/regressor pair."""

    def __init__(self, image_size=32, n_params=8, perfect=True):
        self.image_size = image_size
        self.n_params = n_params
        self.perfect = perfect
        self.meta = {}

    def regress_batch(self, images):
        if not self.perfect:
            return np.zeros((len(images), self.n_params))
        return images[:, 0, : self.n_params, 0].astype(np.float64)

    def edit_batch(self, images, params):
        out = np.array(images, copy=True)
        out[:, 0, : self.n_params, 0] = params
        return out

    def regress(self, image):
        return self.regress_batch(image[None])[0]


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    manifest = generate_dataset(root, 4, 6, 0.0, seed=31, size=(32, 32))
    _, records = load_manifest(manifest)
    return records


class TestRegressionErrorReport:
    def test_perfect_regressor_both_modes(self, tiny_manifest):
        records = tiny_manifest
        # plant the true params in the images so the fake regressor is exact
        engine = FakeEngine()
        import faceslider.evaluation as ev

        orig = ev._record_image
        try:
            ev._record_image = lambda rec, size: engine.edit_batch(
                np.zeros((1, size, size, 3), dtype=np.float32), rec.params[None]
            )[0]
            rep = regression_error_report(engine, records, mode=VS_TRUTH)
            # float32 image storage bounds the "exact zero" at ~1e-7 relative
            assert rep.metrics["relative_error"] == pytest.approx(0.0, abs=1e-6)
            rep2 = regression_error_report(engine, records, mode=CONSISTENCY, seed=3)
            assert rep2.metrics["relative_error"] == pytest.approx(0.0, abs=1e-6)
        finally:
            ev._record_image = orig

    def test_constant_zero_regressor_unit_error(self, tiny_manifest):
        engine = FakeEngine(perfect=False)
        rep = regression_error_report(engine, tiny_manifest, mode=VS_TRUTH)
        assert rep.metrics["relative_error"] == pytest.approx(1.0)
        assert rep.sample_count == len(tiny_manifest)

    def test_near_zero_truth_excluded(self, tmp_path):
        manifest = generate_dataset(tmp_path, 1, 3, 0.0, seed=4, size=(32, 32))
        _, records = load_manifest(manifest)
        records[0] = type(records[0])(
            image_path=records[0].image_path,
            params=np.zeros(8),
            identity_seed=records[0].identity_seed,
            target_path=None,
            target_params=None,
        )
        rep = regression_error_report(FakeEngine(perfect=False), records, mode=VS_TRUTH)
        assert rep.excluded == 1
        assert rep.sample_count == 2

    def test_unknown_mode_rejected(self, tiny_manifest):
        with pytest.raises(ValueError):
            regression_error_report(FakeEngine(), tiny_manifest, mode="bogus")


@pytest.fixture(scope="module")
def micro_engine(tmp_path_factory):
    """Untrained micro-preset engine over a real basis file."""
    rng = np.random.default_rng(0)
    basis = BlendshapeBasis(
        mean=MeshVector(np.zeros(48)),
        components=rng.normal(size=(48, 8)),
        scales=np.ones(8),
    )
    root = tmp_path_factory.mktemp("engine")
    basis_path = root / "basis.bin"
    write_basis(basis, basis_path)
    preset = get_preset("micro")
    g = Generator(8, preset, seed=1)
    d = Discriminator(8, preset, seed=2)
    ckpt = root / "ckpt.npz"
    save_checkpoint(
        ckpt, g, d,
        {"image_size": 32, "basis_hash": file_sha256(basis_path), "basis_kind": "expression"},
    )
    return InferenceEngine.from_files(ckpt, basis_path)


class TestHarnesses:
    def test_self_transfer_matches_self_reconstruction(self, micro_engine, tiny_manifest):
        records = tiny_manifest[:3]
        rep = transfer_harness(micro_engine, records, records)
        assert rep.metrics["mean_transfer_ied"] == pytest.approx(
            rep.metrics["mean_self_reconstruction_ied"], abs=1e-6
        )

    def test_interpolation_a1_equals_source_edit(self, micro_engine, tiny_manifest):
        from faceslider.blendshape import interpolate_parameters

        rec = tiny_manifest[0]
        img = np.asarray(
            __import__("faceslider.synth", fromlist=["load_png_image"]).load_png_image(
                rec.image_path
            )
        )
        p_src = ParameterVector(np.clip(micro_engine.regress(img), -1, 1))
        p_trg = ParameterVector(np.clip(micro_engine.regress(img) * -0.5, -1, 1))
        p_end = interpolate_parameters(p_src, p_trg, 1.0)
        a = micro_engine.edit(img, p_end.values).image
        b = micro_engine.edit(img, p_src.values).image
        np.testing.assert_array_equal(a, b)

    def test_transfer_grid_written(self, micro_engine, tiny_manifest, tmp_path):
        rep = transfer_harness(
            micro_engine, tiny_manifest[:2], tiny_manifest[2:4], out_dir=tmp_path
        )
        assert (tmp_path / "transfer_grid.png").exists()
        assert rep.sample_count == 2

    def test_neutralize_report_fields(self, micro_engine, tiny_manifest, tmp_path):
        rep = neutralize(micro_engine, tiny_manifest[:3], out_dir=tmp_path)
        assert (tmp_path / "neutralize_grid.png").exists()
        for key in (
            "mean_neutralized_ied",
            "mean_input_ied",
            "mean_regressed_norm_out",
            "mean_regressed_norm_in",
        ):
            assert np.isfinite(rep.metrics[key])

    def test_reports_reproducible(self, micro_engine, tiny_manifest):
        a = regression_error_report(micro_engine, tiny_manifest, mode=CONSISTENCY, seed=5)
        b = regression_error_report(micro_engine, tiny_manifest, mode=CONSISTENCY, seed=5)
        assert a.to_json() == b.to_json()

    def test_report_json_shape(self):
        rep = EvalReport(metrics={"m": 1.0}, sample_count=3, config_hash="abc")
        assert '"sample_count":3' in rep.to_json().replace(" ", "")


class TestEngineValidation:
    def test_basis_model_dimension_mismatch(self):
        rng = np.random.default_rng(1)
        basis = BlendshapeBasis(
            mean=MeshVector(np.zeros(48)),
            components=rng.normal(size=(48, 5)),
            scales=np.ones(5),
        )
        preset = get_preset("micro")
        with pytest.raises(ValueError):
            InferenceEngine(Generator(8, preset), Discriminator(8, preset), basis, 32)

    def test_edit_validations(self, micro_engine):
        good = np.zeros((32, 32, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            micro_engine.edit(np.zeros((16, 16, 3)), np.zeros(8))
        with pytest.raises(ValueError):
            micro_engine.edit(good, np.zeros(5))
        with pytest.raises(ValueError):
            micro_engine.edit(good * np.nan, np.zeros(8))
        with pytest.raises(ValueError):
            micro_engine.edit(good + 2.0, np.zeros(8))

    def test_edit_deterministic_and_clamped_params(self, micro_engine):
        img = np.zeros((32, 32, 3), dtype=np.float32)
        a = micro_engine.edit(img, np.full(8, 1.7))
        b = micro_engine.edit(img, np.ones(8))
        np.testing.assert_array_equal(a.image, b.image)
        c = micro_engine.edit(img, np.ones(8))
        np.testing.assert_array_equal(b.image, c.image)
        assert a.mask.shape == (32, 32)
        assert a.mask.min() >= 0 and a.mask.max() <= 1

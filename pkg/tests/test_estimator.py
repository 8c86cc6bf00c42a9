import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from latis.data import make_pair
from latis.errors import DimensionError
from latis.estimator import LATISRegressor
from latis.metrics import bicubic_resize, psnr
from latis.training import save_checkpoint

from conftest import thermal_image

FAST = dict(channels=8, num_lgfb=1, epochs=2, steps_per_epoch=2, batch_size=2, crop=16, emd_epochs=1)


@pytest.fixture(scope="module")
def images():
    rng = np.random.default_rng(7)
    return [thermal_image(rng, 24, 24) for _ in range(3)]


@pytest.fixture(scope="module")
def fitted(images):
    return LATISRegressor(**FAST).fit(images)


class TestParams:
    def test_get_set_params_and_clone(self):
        est = LATISRegressor(scale=3, channels=16)
        params = est.get_params()
        assert params["scale"] == 3 and params["channels"] == 16 and params["use_emd"] is True
        copy = clone(est.set_params(num_lgfb=2))
        assert copy.get_params() == est.get_params() and not hasattr(copy, "params_")

    def test_model_config(self):
        cfg = LATISRegressor(scale=4, use_cbam=False)._model_config()
        assert cfg.scale == 4 and not cfg.use_cbam and cfg.heads * cfg.value_depth == cfg.channels

    def test_schedule(self):
        assert LATISRegressor(use_emd=False)._schedule().lambda_p == 0.0
        assert LATISRegressor(lambda_p=0.25)._schedule().lambda_p == 0.25


class TestFit:
    def test_fitted_attributes(self, fitted):
        assert fitted.n_parameters_ > 0 and fitted.config_.channels == 8
        assert len(fitted.history_) == 2 and len(fitted.loss_log_) == 4
        assert fitted.loss_log_[2].split(",")[3] == "skipped"

    def test_deterministic(self, images, fitted):
        again = LATISRegressor(**FAST).fit(images)
        assert again.loss_log_ == fitted.loss_log_
        for name, value in fitted.params_.items():
            np.testing.assert_array_equal(value.data, again.params_[name].data)

    def test_accepts_stacked_arrays(self, images):
        stacked = np.stack(images)[:, None]
        est = LATISRegressor(**{**FAST, "epochs": 1, "steps_per_epoch": 1}).fit(stacked)
        assert est.n_parameters_ > 0

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            LATISRegressor(**FAST).fit([np.full((24, 24), 2.0)])
        with pytest.raises(DimensionError):
            LATISRegressor(**FAST).fit(np.zeros((24, 24)))
        with pytest.raises(ValueError, match="NaN"):
            LATISRegressor(**FAST).fit([np.full((24, 24), np.nan)])


class TestPredict:
    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            LATISRegressor().predict([np.zeros((8, 8))])

    def test_shapes_and_range(self, fitted, images):
        lrs = [make_pair(img, 2)[0] for img in images] + [np.full((5, 7), 0.5)]
        preds = fitted.predict(lrs)
        assert [p.shape for p in preds] == [(24, 24)] * 3 + [(10, 14)]
        assert all(p.min() >= 0 and p.max() <= 1 for p in preds)

    def test_score_is_mean_psnr(self, fitted, images):
        pairs = [make_pair(img, 2) for img in images]
        lrs, hrs = [p[0] for p in pairs], [p[1] for p in pairs]
        expected = np.mean([psnr(p, h) for p, h in zip(fitted.predict(lrs), hrs)])
        assert fitted.score(lrs, hrs) == pytest.approx(expected)
        with pytest.raises(DimensionError):
            fitted.score(lrs, [h[:-2] for h in hrs])
        with pytest.raises(ValueError):
            fitted.score(lrs, hrs[:2])

    def test_from_checkpoint(self, fitted, images, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", fitted.checkpoint_)
        restored = LATISRegressor.from_checkpoint(tmp_path / "m.ckpt")
        assert restored.channels == 8 and restored.num_lgfb == 1
        lr = make_pair(images[0], 2)[0]
        np.testing.assert_array_equal(restored.predict_one(lr), fitted.predict_one(lr))

    def test_zero_residual_is_bicubic(self, fitted, images):
        est = clone(fitted)
        est._set_fitted(fitted.checkpoint_)
        for value in est.params_.values():
            value.data[...] = 0
        lr, hr = make_pair(images[0], 2)
        np.testing.assert_allclose(est.predict_one(lr), np.clip(bicubic_resize(lr, *hr.shape), 0, 1), atol=1e-6)

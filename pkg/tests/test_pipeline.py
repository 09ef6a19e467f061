import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from iide_lab.codec import decode, encode
from iide_lab.data import ShapesDatasetConfig, generate_shapes_dataset, load_paired_dataset
from iide_lab.denoiser import VocabularyError
from iide_lab.metrics import EvalConfig, evaluate_dataset
from iide_lab.pipeline import RestoreRequest, fidelity_blend, restore, restore_batch

from conftest import perturb_projections


def test_blend_endpoints_exact():
    zs, zc = torch.randn(2, 4, 8, 8), torch.randn(2, 4, 8, 8)
    assert torch.equal(fidelity_blend(zs, zc, 1.0), zs)
    assert torch.equal(fidelity_blend(zs, zc, 0.0), zc)


def test_blend_midpoint_and_errors():
    assert float(fidelity_blend(torch.tensor(2.0), torch.tensor(0.0), 0.5)) == 1.0
    with pytest.raises(ValueError):
        fidelity_blend(torch.zeros(2), torch.zeros(2), 1.2)
    with pytest.raises(ValueError):
        fidelity_blend(torch.zeros(2), torch.zeros(3), 0.5)


@settings(max_examples=50, deadline=None)
@given(w=st.floats(0.0, 1.0), seed=st.integers(0, 2**31 - 1))
def test_blend_is_convex(w, seed):
    g = torch.Generator().manual_seed(seed)
    zs, zc = torch.randn(16, generator=g, dtype=torch.float64), torch.randn(16, generator=g, dtype=torch.float64)
    out = fidelity_blend(zs, zc, w)
    assert torch.all(out <= torch.maximum(zs, zc) + 1e-12) and torch.all(out >= torch.minimum(zs, zc) - 1e-12)


def test_zero_weight_returns_encoded_input(small_model, icodec):
    x = torch.rand(3, 16, 16)
    out = restore(small_model, icodec, RestoreRequest(image=x, prompt="red circle", fidelity_weight=0.0))
    assert torch.equal(out, decode(icodec, encode(icodec, x)))


def test_restore_deterministic(small_model, icodec):
    perturb_projections(small_model)
    req = RestoreRequest(image=torch.rand(3, 16, 16), scratch_mask=torch.zeros(1, 16, 16),
                         prompt=["blue"], n_steps=5, seed=3)
    a, b = restore(small_model, icodec, req), restore(small_model, icodec, req)
    assert torch.equal(a, b) and a.shape == (3, 16, 16)
    assert 0 <= float(a.min()) and float(a.max()) <= 1
    other = restore(small_model, icodec, RestoreRequest(**{**req.__dict__, "seed": 4}))
    assert not torch.equal(a, other)


def test_batch_matches_single_requests(small_model, icodec):
    perturb_projections(small_model)
    x = torch.rand(2, 3, 16, 16)
    batch = restore_batch(small_model, icodec, x, None, [["red"], []], n_steps=4, seeds=[7, 8])
    for i, (p, s) in enumerate([(["red"], 7), (None, 8)]):
        single = restore(small_model, icodec, RestoreRequest(image=x[i], prompt=p, n_steps=4, seed=s))
        torch.testing.assert_close(batch[i], single, rtol=0, atol=1e-6)


def test_restore_errors(small_model, icodec):
    with pytest.raises(VocabularyError):
        restore(small_model, icodec, RestoreRequest(image=torch.rand(3, 16, 16), prompt="mauve", n_steps=2))
    with pytest.raises(ValueError):
        restore(small_model, icodec, RestoreRequest(image=torch.rand(3, 16, 16), scratch_mask=torch.zeros(1, 8, 8),
                                                    n_steps=2))
    with pytest.raises(ValueError):
        restore(small_model, icodec, RestoreRequest(image=torch.rand(2, 16, 16), n_steps=2))
    with pytest.raises(ValueError):
        restore(small_model, icodec, RestoreRequest(image=torch.rand(3, 16, 16), fidelity_weight=1.5))


def test_evaluate_dataset(small_model, icodec, tmp_path):
    out = generate_shapes_dataset(ShapesDatasetConfig(n_images=5, size=16, seed=2), tmp_path / "d")
    ds = load_paired_dataset(out, "on_the_fly", seed=1)
    report = evaluate_dataset(small_model, icodec, ds, EvalConfig(n_steps=3, batch_size=2))
    assert report.stems == ds.stems and len(report.psnr) == 5
    assert abs(report.mean_psnr - sum(report.psnr) / 5) < 1e-9
    assert all(-1 <= s <= 1 for s in report.ssim)
    again = evaluate_dataset(small_model, icodec, ds, EvalConfig(n_steps=3, batch_size=5))
    assert again.psnr == pytest.approx(report.psnr, abs=1e-6)


def test_evaluate_empty_dataset(small_model, icodec):
    with pytest.raises(ValueError):
        evaluate_dataset(small_model, icodec, [])

"""Quick check that the compiled `symunet` module imports and works.

Build and install first:  pip install --no-build-isolation ./crates/py
"""
import math
import os
import tempfile

import symunet


def main():
    cfg = symunet.ModelConfig.tiny()
    cfg.validate()
    model = symunet.Model(cfg, seed=0)
    print("tiny model parameters:", model.count_parameters())
    print("tiny model MACs at 64x64:", model.estimate_flops(64, 64))

    h = w = 24
    clean = symunet.Tensor([3, h, w], [0.25 + 0.5 * ((i * 7) % 13) / 13 for i in range(3 * h * w)])
    noisy = symunet.degrade(clean, "noise:sigma=25", seed=1)
    assert noisy.shape == [3, h, w]

    # zero-initialized output conv: the restored image equals the input
    restored = model.forward(noisy)
    assert restored.tolist() == noisy.tolist()

    p = symunet.psnr(noisy, clean)
    s = symunet.ssim(noisy, clean)
    print(f"noisy psnr {p:.2f} dB, ssim {s:.4f}")
    assert 15.0 < p < 30.0
    assert symunet.psnr(clean, clean) == 100.0
    assert symunet.l1_loss(clean, clean) == 0.0
    assert symunet.total_loss(noisy, clean, 0.0) == symunet.l1_loss(noisy, clean)
    assert symunet.cosine_lr(0, 100) == 1e-3
    assert symunet.cosine_lr(100, 100) == 1e-7

    feats = model.extract_features(noisy, ["f_enc_0", "f_dec_0"])
    assert feats["f_enc_0"].shape == [16, h, w]

    with tempfile.TemporaryDirectory() as d:
        ckpt = os.path.join(d, "ckpt")
        model.save(ckpt)
        again = symunet.Model.load(ckpt)
        assert again.count_parameters() == model.count_parameters()
        path = os.path.join(d, "t.symt")
        clean.save_symt(path)
        assert symunet.Tensor.load_symt(path).tolist() == clean.tolist()

    try:
        symunet.degrade(clean, "snow")
    except ValueError as e:
        assert "valid kinds" in str(e)
    else:
        raise AssertionError("unknown degradation accepted")
    assert not math.isnan(p)
    print("smoke test passed")


if __name__ == "__main__":
    main()

from __future__ import annotations

import numpy as np
import pytest
import torch

from murestitch import (TrainConfig, build_model, finetune_object,
                        gen_synthetic_corpus, load_checkpoint, make_schedule,
                        pretrain_toy, save_checkpoint)
from murestitch.diffusion import DenoiserInput, unet_forward
from murestitch.finetune import (Checkpoint, load_corpus,
                                 trainable_parameters)

from conftest import micro_model_config


def _micro_checkpoint(seed=0):
    # Fully live random weights so every pathway carries gradient immediately
    # (the production zero-init head gates upstream flow for the first steps).
    from murestitch.unet import init_parameters

    model = build_model(micro_model_config(), seed=seed)
    init_parameters(model, seed, zero_final=False, zero_cross_attn=False)
    return Checkpoint(model=model, schedule=make_schedule(40, 1e-3, 0.05),
                      config={"phase": "test"})


def _micro_corpus(tmp_path, objects=2, scenes=2, seed=0):
    corpus = tmp_path / "corpus"
    gen_synthetic_corpus(objects, scenes, seed=seed, out_dir=corpus,
                         resolution=16)
    return corpus


def _probe_output(model, seed=0):
    cfg = model.config
    gen = torch.Generator().manual_seed(seed)
    inp = DenoiserInput(
        noisy=torch.randn(1, 3, cfg.image_size, cfg.image_size, generator=gen),
        background=torch.randn(1, 3, cfg.image_size, cfg.image_size, generator=gen),
        mask=torch.zeros(1, 1, cfg.image_size, cfg.image_size),
        timestep=torch.tensor([7]),
        cond=torch.randn(1, 6, cfg.token_dim, generator=gen))
    with torch.no_grad():
        return unet_forward(inp, model.unet)


def test_train_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError, match="finetune_scope"):
        TrainConfig(finetune_scope="everything")


def test_checkpoint_roundtrip_is_bit_identical(tmp_path):
    ckpt = _micro_checkpoint()
    before = _probe_output(ckpt.model)
    path = tmp_path / "model.npz"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    after = _probe_output(loaded.model)
    assert torch.equal(before, after)
    for (na, pa), (nb, pb) in zip(ckpt.model.state_dict().items(),
                                  loaded.model.state_dict().items()):
        assert na == nb
        assert torch.equal(pa, pb)
    assert loaded.schedule.T == ckpt.schedule.T
    assert np.array_equal(loaded.schedule.betas, ckpt.schedule.betas)


def test_checkpoint_archive_format(tmp_path):
    # Contract: single .npz archive of named little-endian float32 arrays
    # plus one JSON metadata entry carrying a format tag, schedule params,
    # config snapshot, and the step counter.
    import json

    ckpt = _micro_checkpoint()
    ckpt.step = 17
    path = tmp_path / "fmt.npz"
    save_checkpoint(path, ckpt)
    with np.load(path, allow_pickle=False) as data:
        names = set(data.files)
        assert "__meta__" in names
        params = [n for n in names if n.startswith("param:")]
        assert len(params) == len(ckpt.model.state_dict())
        for n in params:
            arr = data[n]
            assert arr.dtype == np.dtype("<f4")
        meta = json.loads(str(data["__meta__"]))
    assert meta["format"] == "murestitch-ckpt-v1"
    assert meta["step"] == 17
    assert meta["schedule"]["timesteps"] == 40
    assert meta["model"]["unet_channels"] == [8, 12, 16]


def test_checkpoint_rejects_wrong_format(tmp_path):
    path = tmp_path / "bogus.npz"
    np.savez(path, stuff=np.zeros(3))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.npz")


def test_pretrain_loss_decreases_and_logs(tmp_path, caplog):
    corpus = _micro_corpus(tmp_path, objects=3, scenes=3)
    cfg = TrainConfig(epochs=6, lr=2e-3, batch_size=3, seed=1)
    with caplog.at_level("INFO", logger="murestitch.finetune"):
        ckpt = pretrain_toy(corpus, cfg, model_config=micro_model_config(),
                            schedule=make_schedule(40, 1e-3, 0.05))
    assert len(ckpt.loss_history) == 6
    assert ckpt.loss_history[-1] < ckpt.loss_history[0]
    assert ckpt.step > 0
    assert sum("pretrain epoch" in r.message for r in caplog.records) == 6


def test_pretrain_deterministic_loss_curve(tmp_path):
    corpus = _micro_corpus(tmp_path)
    cfg = TrainConfig(epochs=2, lr=1e-3, batch_size=2, seed=3)
    a = pretrain_toy(corpus, cfg, model_config=micro_model_config(),
                     schedule=make_schedule(40, 1e-3, 0.05))
    b = pretrain_toy(corpus, cfg, model_config=micro_model_config(),
                     schedule=make_schedule(40, 1e-3, 0.05))
    assert a.loss_history == b.loss_history
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_pretrain_rejects_oversized_batch(tmp_path):
    corpus = _micro_corpus(tmp_path)  # 4 scenes total
    cfg = TrainConfig(epochs=1, batch_size=5, seed=0)
    with pytest.raises(ValueError, match="batch_size"):
        pretrain_toy(corpus, cfg, model_config=micro_model_config(),
                     schedule=make_schedule(40, 1e-3, 0.05))


def test_pretrain_empty_corpus_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError, match="no object directories"):
        pretrain_toy(empty, TrainConfig(epochs=1),
                     model_config=micro_model_config())


def test_finetune_deterministic_final_weights(tmp_path):
    corpus = _micro_corpus(tmp_path)
    images = load_corpus(corpus)[0]
    base = _micro_checkpoint()
    cfg = TrainConfig(epochs=2, lr=1e-3, batch_size=2, seed=9)
    a = finetune_object(base, images, cfg)
    b = finetune_object(base, images, cfg)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)
    assert a.step == b.step


def test_finetune_does_not_mutate_base(tmp_path):
    corpus = _micro_corpus(tmp_path)
    images = load_corpus(corpus)[0]
    base = _micro_checkpoint()
    before = {k: v.clone() for k, v in base.model.state_dict().items()}
    finetune_object(base, images, TrainConfig(epochs=1, batch_size=1, seed=0))
    for k, v in base.model.state_dict().items():
        assert torch.equal(before[k], v)


def test_finetune_single_image_runs(tmp_path):
    corpus = _micro_corpus(tmp_path, objects=1, scenes=1)
    images = load_corpus(corpus)[0]
    ckpt = finetune_object(_micro_checkpoint(), images,
                           TrainConfig(epochs=1, batch_size=1, seed=0))
    assert ckpt.step == 1
    assert ckpt.config["k_refs"] == 1


def test_finetune_scope_freezes_encoder_backbone(tmp_path):
    corpus = _micro_corpus(tmp_path)
    images = load_corpus(corpus)[0]
    base = _micro_checkpoint()
    cfg = TrainConfig(epochs=2, lr=1e-2, batch_size=2, seed=4,
                      finetune_scope="denoiser_and_adaptor")
    tuned = finetune_object(base, images, cfg)
    base_state = base.model.state_dict()
    tuned_state = tuned.model.state_dict()
    adaptor_moved = unet_moved = False
    for name in base_state:
        same = torch.equal(base_state[name], tuned_state[name])
        if name.startswith("encoder.") and "adaptor" not in name:
            assert same, f"frozen backbone parameter {name} moved"
        elif name.startswith("encoder.adaptor"):
            adaptor_moved |= not same
        elif name.startswith("unet."):
            unet_moved |= not same
    assert adaptor_moved and unet_moved


def test_finetune_scope_all_moves_backbone(tmp_path):
    corpus = _micro_corpus(tmp_path)
    images = load_corpus(corpus)[0]
    base = _micro_checkpoint()
    cfg = TrainConfig(epochs=2, lr=1e-2, batch_size=2, seed=4,
                      finetune_scope="all")
    tuned = finetune_object(base, images, cfg)
    moved = any(
        not torch.equal(pa, pb)
        for (na, pa), (nb, pb) in zip(base.model.state_dict().items(),
                                      tuned.model.state_dict().items())
        if na.startswith("encoder.") and "adaptor" not in na)
    assert moved


def test_finetune_k_refs_bounds(tmp_path):
    corpus = _micro_corpus(tmp_path)
    images = load_corpus(corpus)[0]
    with pytest.raises(ValueError, match="k_refs"):
        finetune_object(_micro_checkpoint(), images,
                        TrainConfig(epochs=1), k_refs=5)


def test_trainable_parameters_scopes(micro_model):
    all_params = trainable_parameters(micro_model, "all")
    subset = trainable_parameters(micro_model, "denoiser_and_adaptor")
    assert len(all_params) == len(list(micro_model.parameters()))
    assert len(subset) < len(all_params)
    subset_ids = {id(p) for p in subset}
    assert all(id(p) in subset_ids for p in micro_model.unet.parameters())
    assert all(id(p) in subset_ids for p in micro_model.encoder.adaptor.parameters())
    backbone = [p for p in micro_model.encoder.parameters()
                if id(p) not in {id(q) for q in micro_model.encoder.adaptor.parameters()}]
    assert all(id(p) not in subset_ids for p in backbone)


def test_step_counter_continues_on_resume(tmp_path):
    corpus = _micro_corpus(tmp_path)
    cfg = TrainConfig(epochs=1, lr=1e-3, batch_size=2, seed=2)
    first = pretrain_toy(corpus, cfg, model_config=micro_model_config(),
                         schedule=make_schedule(40, 1e-3, 0.05))
    steps_per_epoch = first.step
    second = pretrain_toy(corpus, cfg, resume_from=first)
    assert second.step == steps_per_epoch * 2

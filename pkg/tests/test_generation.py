import dataclasses
import json

import pytest
import torch

from config.settings import clone, get_preset
from core.errors import ConfigError, ContextOverflowError, GenerationError
from core.flow_math import integrate_rf_ode
from core.rng import RngStream
from data.embedding_file import read_embeddings
from inference.generator import (
    _Context,
    continue_sequence,
    export_traces,
    generate,
    generate_batch,
    generate_givt,
    generation_stream,
    position_stream,
)
from models.gmm_head import GMMParams


def gen_config(tiny_config, **changes):
    return dataclasses.replace(tiny_config.generation, **changes)


@pytest.fixture
def long_context_config(tiny_config):
    cfg = clone(tiny_config)
    cfg.model.backbone.max_context = 128
    return cfg


def test_zero_injection_feeds_back_clean(tiny_config, model_factory):
    trace = generate(model_factory("cam"), gen_config(tiny_config, k_inf=0.0))
    assert len(trace) == 32
    assert torch.equal(trace.fed_back, trace.clean)


def test_single_step_is_one_ode_solve(tiny_config, model_factory):
    model = model_factory("cam").eval()
    cfg = gen_config(tiny_config, target_length=1)
    rng = RngStream(21)
    trace = generate(model, cfg, rng)
    with torch.no_grad():
        y_init = position_stream(rng, 0, 0).split("init").normal((4,)).unsqueeze(0)
        z = model.z_sos.expand(1, -1)
        expected = integrate_rf_ode(lambda y, s: model.sampler_forward(y, s, z), y_init, cfg.num_steps_denoise)
    assert torch.allclose(trace.clean, expected, atol=1e-6)


@pytest.mark.parametrize("objective", ["cam", "givt"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cache_matches_recompute(long_context_config, model_factory, objective, seed):
    model = model_factory(objective, model_config=long_context_config.model)
    base = gen_config(long_context_config, target_length=128, context_window=127, seed=seed)
    cached = generate(model, dataclasses.replace(base, use_cache=True), generation_stream(base))
    naive = generate(model, dataclasses.replace(base, use_cache=False), generation_stream(base))
    assert torch.allclose(cached.clean, naive.clean, atol=1e-4)


def test_cache_matches_recompute_past_window(tiny_config, model_factory):
    model = model_factory("mar_rf")
    cfg = gen_config(tiny_config, target_length=40)
    cached = generate(model, dataclasses.replace(cfg, use_cache=True))
    naive = generate(model, dataclasses.replace(cfg, use_cache=False))
    assert torch.allclose(cached.clean, naive.clean, atol=1e-4)


@torch.no_grad()
def test_window_truncation(tiny_config, model_factory, rng):
    model = model_factory("cam").eval()
    shared = [rng.split("shared", i).normal((1, 4)) for i in range(4)]
    outputs = []
    for variant in range(2):
        for use_cache in (True, False):
            context = _Context(model, 4, use_cache)
            for i in range(3):
                context.append(rng.split("early", variant, i).normal((1, 4)))
            for x in shared:
                context.append(x)
            outputs.append(context.condition(1))
    assert all(torch.equal(out, outputs[0]) for out in outputs[1:])


@torch.no_grad()
def test_cache_is_dropped_past_window(model_factory, rng):
    context = _Context(model_factory("cam").eval(), 3, use_cache=True)
    for i in range(3):
        context.append(rng.split("x", i).normal((1, 4)))
        context.condition(1)
    assert context.cache.current_length == 3
    context.append(rng.split("x", 3).normal((1, 4)))
    context.condition(1)
    assert context.cache is None


def test_same_seed_same_trace(tiny_config, model_factory):
    model = model_factory("givt_noise")
    cfg = gen_config(tiny_config)
    assert torch.equal(generate(model, cfg).clean, generate(model, cfg).clean)
    other = generate(model, dataclasses.replace(cfg, seed=1))
    assert not torch.equal(generate(model, cfg).clean, other.clean)


def test_empty_prompt_equals_generate(tiny_config, model_factory):
    model = model_factory("cam")
    cfg = gen_config(tiny_config)
    assert torch.equal(continue_sequence(model, torch.zeros(0, 4), cfg).clean, generate(model, cfg).clean)


@pytest.mark.parametrize("use_cache, atol", [(False, 1e-6), (True, 1e-4)])
def test_continuation_reproduces_tail(tiny_config, model_factory, use_cache, atol):
    model = model_factory("cam")
    cfg = gen_config(tiny_config, target_length=14, use_cache=use_cache)
    full = generate(model, cfg)
    tail = continue_sequence(model, full.clean[:6], dataclasses.replace(cfg, target_length=8))
    assert tail.prompt_length == 6
    assert len(tail) == 8
    assert torch.allclose(tail.clean, full.clean[6:], atol=atol)
    assert torch.allclose(tail.fed_back, full.fed_back[6:], atol=atol)


def test_desk_continuation_of_full_window_prompt(model_factory):
    desk = get_preset("desk")
    model = model_factory("cam", model_config=desk.model)
    cfg = dataclasses.replace(desk.generation, num_steps_denoise=4, use_cache=False)
    assert cfg.context_window == 64 and cfg.target_length == 128
    full = generate(model, cfg)
    tail = continue_sequence(model, full.clean[:64], dataclasses.replace(cfg, target_length=64))
    assert tail.prompt_length == 64
    assert torch.allclose(tail.clean, full.clean[64:], atol=1e-6)


def test_prompt_longer_than_window(tiny_config, model_factory):
    cfg = gen_config(tiny_config)
    with pytest.raises(ContextOverflowError):
        continue_sequence(model_factory("cam"), torch.zeros(cfg.context_window + 1, 4), cfg)


@pytest.mark.parametrize("objective", ["cam", "mar_linear", "givt_noise"])
def test_batch_matches_single(tiny_config, model_factory, objective):
    model = model_factory(objective)
    cfg = gen_config(tiny_config, target_length=12)
    batch = generate_batch(model, cfg, num_traces=5, chunk_size=3)
    assert [t.trace_index for t in batch] == list(range(5))
    for i, trace in enumerate(batch):
        single = generate(model, cfg, trace_index=i)
        assert torch.allclose(trace.clean, single.clean, atol=1e-5)


def test_near_zero_temperature_is_deterministic(tiny_config, model_factory):
    tiny_config.model.gmm.num_modes = 1
    model = model_factory("givt", model_config=tiny_config.model)
    cfg = gen_config(tiny_config, temperature=1e-6, k_inf=0.0)
    a = generate_givt(model, cfg, RngStream(0))
    b = generate_givt(model, cfg, RngStream(1))
    assert (a.clean - b.clean).abs().max().item() <= 1e-3


def test_generate_givt_requires_mixture_head(tiny_config, model_factory):
    with pytest.raises(ConfigError):
        generate_givt(model_factory("cam"), gen_config(tiny_config))


def test_convex_injection_size(tiny_config, model_factory):
    k = 0.02
    traces = generate_batch(model_factory("cam"), gen_config(tiny_config, k_inf=k), num_traces=64)
    clean = torch.cat([t.clean for t in traces]).double()
    fed = torch.cat([t.fed_back for t in traces]).double()
    observed = (fed - clean).pow(2).sum().item()
    expected = k ** 2 * (clean.shape[0] * clean.shape[1] + clean.pow(2).sum().item())
    assert observed == pytest.approx(expected, rel=0.08)


def test_additive_injection_adds_variance(tiny_config, model_factory):
    k = 0.1
    cfg = gen_config(tiny_config, k_inf=k, injection="additive")
    traces = generate_batch(model_factory("cam"), cfg, num_traces=64)
    clean = torch.cat([t.clean for t in traces]).double()
    fed = torch.cat([t.fed_back for t in traces]).double()
    assert (fed - clean).pow(2).mean().item() == pytest.approx(k ** 2, rel=0.08)
    assert (fed.var(0) >= clean.var(0)).all()


def test_non_finite_output(tiny_config, model_factory, monkeypatch):
    model = model_factory("givt")

    def broken_head(z):
        n = z.shape[0]
        return GMMParams(torch.ones(n, 1), torch.full((n, 1, 4), float("nan")), torch.ones(n, 1, 4))

    monkeypatch.setattr(model, "gmm_head_forward", broken_head)
    with pytest.raises(GenerationError) as info:
        generate(model, gen_config(tiny_config), trace_index=3)
    assert info.value.position == 0
    assert info.value.trace_index == 3


def test_export_traces(tiny_config, model_factory, tmp_path):
    cfg = gen_config(tiny_config, target_length=8)
    traces = generate_batch(model_factory("mar_rf"), cfg, num_traces=3)
    meta_path = export_traces(traces, tmp_path, cfg, {"objective": "mar_rf"})
    clean = read_embeddings(tmp_path / "clean.came")
    fed = read_embeddings(tmp_path / "fed_back.came")
    assert all(torch.equal(a, t.clean) for a, t in zip(clean.sequences, traces))
    assert all(torch.equal(a, t.fed_back) for a, t in zip(fed.sequences, traces))
    meta = json.loads(meta_path.read_text())
    assert meta["objective"] == "mar_rf"
    assert meta["generation"]["target_length"] == 8
    assert [t["index"] for t in meta["traces"]] == [0, 1, 2]
    assert len(meta["traces"][0]["step_us"]) == 8


def test_data_space_mapping(tiny_config, model_factory):
    trace = generate(model_factory("cam"), gen_config(tiny_config, target_length=4))
    stats = {"mean": torch.full((4,), 2.0, dtype=torch.float64), "std": torch.full((4,), 3.0, dtype=torch.float64)}
    mapped = trace.to_data_space(stats)
    assert torch.allclose(mapped.clean, trace.clean * 3 + 2, atol=1e-5)
    assert trace.to_data_space(None) is trace

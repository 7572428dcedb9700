import dataclasses

import pytest

from recurseg.config import (ConfigError, PipelineConfig, dumps_config,
                             fingerprint, load_bg_set, load_config,
                             loads_config, preset, save_config,
                             validate_config)


class TestValidateConfig:
    def test_voc_defaults_ok(self):
        cfg = PipelineConfig()
        assert validate_config(cfg) == []
        assert (cfg.eta, cfg.theta, cfg.lam) == (0.4, 0.6, 0.4)

    def test_eta_out_of_range(self):
        cfg = dataclasses.replace(PipelineConfig(), eta=1.5)
        errors = validate_config(cfg)
        assert any("eta" in e for e in errors)

    def test_empty_prompt_types(self):
        cfg = dataclasses.replace(PipelineConfig(), prompt_types=())
        assert validate_config(cfg)

    def test_collects_multiple_errors(self):
        cfg = dataclasses.replace(PipelineConfig(), eta=-1.0, theta=2.0,
                                  sinkhorn_iters=0)
        assert len(validate_config(cfg)) >= 3


class TestPresets:
    def test_paper_threshold_sets(self):
        voc = preset("voc")
        assert (voc.eta, voc.theta, voc.lam) == (0.4, 0.6, 0.4)
        coco = preset("coco")
        assert (coco.eta, coco.theta, coco.lam) == (0.5, 0.3, 0.5)
        ctx = preset("context")
        assert (ctx.eta, ctx.theta, ctx.lam) == (0.6, 0.2, 0.4)
        assert ctx.mutual_background

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("imagenet")


class TestBgSets:
    def test_sizes(self):
        assert len(load_bg_set("terrestrial")) == 32
        assert len(load_bg_set("aquatic_atmospheric")) == 44
        assert len(load_bg_set("manmade")) == 36
        assert len(load_bg_set("all")) == 112
        assert load_bg_set("none") == ()

    def test_known_entries(self):
        assert "grass" in load_bg_set("terrestrial")
        assert "sky" in load_bg_set("aquatic_atmospheric")
        assert "building" in load_bg_set("manmade")

    def test_default_config_uses_all(self):
        assert PipelineConfig().bg_queries == load_bg_set("all")


class TestSerialization:
    def test_round_trip(self, tmp_path):
        cfg = dataclasses.replace(
            PipelineConfig(), eta=0.55, prompt_types=("contour", "gray"),
            bg_queries=("sky", "sea"), stuff_queries=("sky",),
            mutual_background=True)
        path = tmp_path / "pipeline.cfg"
        save_config(path, cfg)
        assert load_config(path) == cfg

    def test_lambda_key_maps_to_lam(self):
        cfg = loads_config('lambda = 0.25\nbg_queries = ["sky"]\n')
        assert cfg.lam == 0.25

    def test_sections(self):
        text = (
            'bg_set = "none"\n'
            "[crf]\n"
            "iterations = 3\n"
            "gauss_w = 0.5\n"
            "[prompt]\n"
            "color = [0, 255, 0]\n"
        )
        cfg = loads_config(text)
        assert cfg.crf.iterations == 3
        assert cfg.crf.gauss_w == 0.5
        assert cfg.prompt_style.color == (0, 255, 0)
        assert cfg.bg_queries == ()

    def test_comments_and_blank_lines(self):
        cfg = loads_config("# a comment\n\neta = 0.5  # trailing\n")
        assert cfg.eta == 0.5

    def test_parse_error_cites_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            loads_config("eta = 0.4\nnot a key value\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="mystery"):
            loads_config("mystery = 1\n")

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError, match="line 1"):
            loads_config("eta = zebra\n")

    def test_invariants_checked_on_load(self):
        with pytest.raises(ConfigError, match="eta"):
            loads_config("eta = 1.5\n")


def test_fingerprint_stability():
    a = PipelineConfig()
    b = PipelineConfig()
    assert fingerprint(a) == fingerprint(b)
    c = dataclasses.replace(a, eta=0.41)
    assert fingerprint(a) != fingerprint(c)
    assert len(fingerprint(a)) == 12


def test_dumps_parses_back():
    cfg = PipelineConfig()
    assert loads_config(dumps_config(cfg)) == cfg

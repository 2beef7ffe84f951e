from pathlib import Path

import pytest

from config import ExperimentConfig, load_config, parse_config_text, resolved_config_text
from services.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'configs'


def test_defaults_match_the_pouring_experiment():
    cfg = load_config()
    assert (cfg.gps.N, cfg.gps.T, cfg.gps.n) == (10, 50, 4)
    assert cfg.gps.env.target == 100.0
    assert (cfg.gps.env.fill_min, cfg.gps.env.fill_max) == (200.0, 400.0)
    assert cfg.gps.gmm.K == 5
    assert cfg.gps.seed == cfg.seed


def test_values_are_typed_and_sections_applied():
    cfg = parse_config_text(
        '[gps]\nN = 3\nconvergence_threshold = 2.5\n'
        '[gmm]\npool_trajectories = yes\n'
        '[experiment]\nname = trial\nseed = 9\n'
    )
    assert cfg.gps.N == 3
    assert cfg.gps.convergence_threshold == 2.5
    assert cfg.gps.gmm.pool_trajectories is True
    assert cfg.name == 'trial'
    assert cfg.gps.seed == 9


def test_explicit_gps_seed_wins_over_experiment_seed():
    cfg = parse_config_text('[experiment]\nseed = 1\n[gps]\nseed = 5\n')
    assert (cfg.seed, cfg.gps.seed) == (1, 5)


def test_unknown_key_names_field_and_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text('[gps]\nN = 3\nhorizon = 50\n')
    assert info.value.field == 'gps.horizon'
    assert info.value.line == 3
    assert 'line 3' in str(info.value)


def test_unknown_section_is_rejected():
    with pytest.raises(ConfigError):
        parse_config_text('[robot]\narm = left\n')


def test_bad_value_reports_its_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text('[env]\n\ndt = fast\n')
    assert info.value.field == 'env.dt'
    assert info.value.line == 3


@pytest.mark.parametrize('text, field', [
    ('[gps]\nT = 1\n', 'gps.T'),
    ('[gps]\ninner_iters = 0\n', 'gps.inner_iters'),
    ('[env]\ntarget = 250\n', 'env.target'),
    ('[gmm]\nprior = flat\n', 'gmm.prior'),
    ('[policy]\nmomentum = 1.0\n', 'policy.momentum'),
])
def test_invariant_violations_are_rejected(text, field):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.field == field


def test_malformed_text_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_config_text('N = 3\n')


def test_overrides_apply_after_the_file():
    cfg = parse_config_text('[experiment]\nout_dir = a\n', overrides={('experiment', 'out_dir'): 'b'})
    assert cfg.out_dir == 'b'


def test_output_dir_environment_override(monkeypatch):
    monkeypatch.setenv('GPS_OUTPUT_DIR', '/tmp/elsewhere')
    assert parse_config_text('[experiment]\nout_dir = a\n').out_dir == '/tmp/elsewhere'
    cli = parse_config_text('', overrides={('experiment', 'out_dir'): 'c'})
    assert cli.out_dir == 'c'


def test_resolved_text_round_trips():
    cfg = parse_config_text('[gps]\nN = 4\n[trajopt]\nlam_max = 3.5\n[policy]\nepochs = 7\n')
    again = parse_config_text(resolved_config_text(cfg))
    assert again == cfg


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'absent.ini'))


def test_shipped_configs_are_valid():
    assert load_config(str(CONFIG_DIR / 'pouring.ini')).gps.n == 4
    assert load_config(str(CONFIG_DIR / 'pouring_no_history.ini')).gps.n == 1
    assert isinstance(load_config(str(CONFIG_DIR / 'pouring.ini')), ExperimentConfig)


def test_infinite_threshold_disables_the_stop_rule():
    cfg = parse_config_text('[gps]\nconvergence_threshold = inf\n')
    assert cfg.gps.convergence_threshold == float('inf')
    assert 'convergence_threshold = inf' in resolved_config_text(cfg)

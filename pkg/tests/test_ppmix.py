"""
命令行与运行配置测试
"""

import json
import os

import numpy as np
import pytest

import ppmix
from errors import ConfigError
from point_data import MarkDescriptor, MarkedPointPattern, MarkSchema, ObservationWindow, write_pattern


def tiny_raw(out, command='run'):
    return {
        'name': 'tiny',
        'command': command,
        'data': {'source': 'simulate', 'generator': 'homogeneous', 'rate': 30, 'seed': 8,
                 'window': [[0.0, 1.0]], 'schema': []},
        'model': {'blocks': [{'family': 'beta', 'dims': [0]}]},
        'mcmc': {'iterations': 12, 'burn_in': 2, 'thin': 5, 'seed': 3},
        'functionals': {'grid_size': 20},
        'diagnostics': [{'kind': 'temporal'}],
        'output': str(out),
    }


def write_json(path, raw):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(raw, f)
    return str(path)


class TestConfig:
    def test_collects_every_problem(self, tmp_path):
        raw = tiny_raw(tmp_path)
        raw['command'] = 'explode'
        raw['mcmc']['iterations'] = 0
        raw['data'] = {'window': [[0.0, 1.0]]}
        with pytest.raises(ConfigError) as info:
            ppmix.validate_config(ppmix.parse_config(raw))
        assert len(info.value.problems) >= 3

    def test_unknown_top_level_key(self, tmp_path):
        raw = tiny_raw(tmp_path)
        raw['sampler'] = 'slice'
        with pytest.raises(ConfigError):
            ppmix.parse_config(raw)

    def test_not_an_object(self):
        with pytest.raises(ConfigError):
            ppmix.parse_config([1, 2])

    def test_round_trip(self, tmp_path):
        cfg = ppmix.parse_config(tiny_raw(tmp_path))
        again = ppmix.parse_config(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()
        assert again.sha256() == cfg.sha256()

    def test_defaults_filled(self, tmp_path):
        cfg = ppmix.parse_config(tiny_raw(tmp_path))
        assert cfg.truncation['tolerance'] == pytest.approx(1e-6)
        assert cfg.functionals['curves'] == [{'kind': 'intensity'}]
        assert cfg.intensity_prior == 'reference'

    def test_unknown_mark_in_curve(self, tmp_path):
        raw = tiny_raw(tmp_path)
        raw['functionals']['curves'] = [{'kind': 'mark_mean', 'mark': 'y'}]
        with pytest.raises(ConfigError):
            ppmix.validate_config(ppmix.parse_config(raw))

    def test_missing_data_file(self, tmp_path):
        raw = tiny_raw(tmp_path)
        raw['data'] = {'source': 'file', 'format': 'temporal', 'path': str(tmp_path / 'none.csv'),
                       'window': [[0.0, 1.0]], 'schema': []}
        with pytest.raises(ConfigError) as info:
            ppmix.validate_config(ppmix.parse_config(raw))
        assert any('none.csv' in p for p in info.value.problems)

    @pytest.mark.parametrize('preset', ['sim51', 'pines', 'coal-direct', 'coal-transformed'])
    def test_presets_parse(self, preset):
        cfg = ppmix.load_config(preset=preset)
        assert cfg.name == preset

    def test_sim51_preset_validates(self):
        model = ppmix.validate_config(ppmix.load_config(preset='sim51'))
        assert model.dims == 1
        assert model.schema.names == ['z', 'y']

    def test_overrides(self, tmp_path):
        cfg = ppmix.load_config(write_json(tmp_path / 'c.json', tiny_raw('tiny')))
        args = ppmix.build_parser().parse_args(['fit', '--seed', '42', '--iters', '7', '--chains', '2',
                                                '--out', str(tmp_path / 'o')])
        ppmix.apply_overrides(cfg, args)
        assert (cfg.command, cfg.mcmc.seed, cfg.mcmc.iterations, cfg.chains) == ('fit', 42, 7, 2)
        assert cfg.output_dir == str(tmp_path / 'o')


class TestMain:
    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text('{not json', encoding='utf-8')
        assert ppmix.main(['fit', '--config', str(path)]) == 1

    def test_missing_config(self, tmp_path):
        assert ppmix.main(['fit', '--config', str(tmp_path / 'absent.json')]) == 1

    def test_verify_without_manifest(self, tmp_path):
        assert ppmix.main(['verify', '--out', str(tmp_path)]) == 1


@pytest.mark.slow
class TestEndToEnd:
    def test_run_and_verify(self, tmp_path):
        out = tmp_path / 'tiny'
        path = write_json(tmp_path / 'tiny.json', tiny_raw(out))
        assert ppmix.main(['run', '--config', path, '--quiet']) == 0
        for name in ('data.csv', 'chain.jsonl', 'intensity.csv', 'qq_temporal.csv', 'manifest.json'):
            assert (out / name).is_file()
        assert ppmix.verify_manifest(str(out)) == []
        assert ppmix.main(['verify', '--out', str(out)]) == 0

        chain_text = (out / 'chain.jsonl').read_text(encoding='utf-8')
        with open(out / 'intensity.csv', 'a', encoding='utf-8') as f:
            f.write('0,0,0,0\n')
        assert ppmix.verify_manifest(str(out)) == ['intensity.csv']
        assert ppmix.main(['verify', '--out', str(out)]) == 1

        assert ppmix.main(['run', '--config', path, '--quiet']) == 0
        assert (out / 'chain.jsonl').read_text(encoding='utf-8') == chain_text

    def test_split_commands(self, tmp_path):
        out = tmp_path / 'split'
        path = write_json(tmp_path / 'split.json', tiny_raw(out, command='fit'))
        assert ppmix.main(['fit', '--config', path, '--quiet', '--chains', '2']) == 0
        assert (out / 'chain_1.jsonl').is_file() and (out / 'chain_2.jsonl').is_file()
        assert ppmix.main(['functionals', '--config', path, '--quiet', '--chains', '2']) == 0
        assert (out / 'intensity.csv').is_file()

    def test_functionals_need_chain(self, tmp_path):
        out = tmp_path / 'nochain'
        path = write_json(tmp_path / 'n.json', tiny_raw(out, command='functionals'))
        assert ppmix.main(['functionals', '--config', path, '--quiet']) == 1

    def test_count_marks_from_file(self, tmp_path, rng):
        schema = MarkSchema((MarkDescriptor('deaths', 'count', bound=10),))
        window = ObservationWindow(((0.0, 40550.0),))
        t = np.sort(rng.uniform(100.0, 40000.0, size=40))
        deaths = 10 + rng.poisson(5.0, size=40)
        pattern = MarkedPointPattern(window, schema, (t / 40550.0).reshape(-1, 1), deaths.reshape(-1, 1))
        data = write_pattern(pattern, str(tmp_path / 'coal.csv'))

        raw = json.loads(open(os.path.join(ppmix.config.PRESET_DIR, 'coal-direct.json'), encoding='utf-8').read())
        raw['data']['path'] = data
        raw['mcmc'].update({'iterations': 8, 'burn_in': 2, 'thin': 3, 'seed': 1})
        raw['functionals']['grid_size'] = 10
        raw['truncation'] = {'level': 5}
        raw['output'] = str(tmp_path / 'coal')
        cfg = ppmix.parse_config(raw)
        written = ppmix.run_experiment(cfg, verbose=False)
        names = {os.path.basename(p) for p in written}
        assert {'chain.jsonl', 'intensity.csv', 'mark_mean_deaths.csv', 'qq_temporal.csv',
                'qq_mark_deaths.csv', 'manifest.json'} <= names
        assert 'data.csv' not in names

    def test_manifest_skips_stale_files(self, tmp_path):
        out = tmp_path / 'stale'
        out.mkdir()
        (out / 'old_result.csv').write_text('x\n1\n', encoding='utf-8')
        path = write_json(tmp_path / 'stale.json', tiny_raw(out, command='fit'))
        assert ppmix.main(['fit', '--config', path, '--quiet']) == 0
        manifest = json.loads((out / 'manifest.json').read_text(encoding='utf-8'))
        assert set(manifest['files']) == {'chain.jsonl'}

        assert ppmix.main(['functionals', '--config', path, '--quiet']) == 0
        manifest = json.loads((out / 'manifest.json').read_text(encoding='utf-8'))
        assert 'old_result.csv' not in manifest['files']
        assert {'chain.jsonl', 'intensity.csv'} <= set(manifest['files'])
        assert ppmix.verify_manifest(str(out)) == []

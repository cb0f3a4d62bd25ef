import pytest

from fevit.checkpoint import read_file
from fevit.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

TINY_CONF = """\
# tiny model and data for fast runs
hidden = 16
heads = 2
mlp_dim = 32
spatial_depth = 1
temporal_depth = 1
train_clips_per_class = 2
eval_clips_per_class = 1
local_batch = 4
warmup_epochs = 0.25
epochs = 1
frames = 2
prefetch_depth = 0
"""


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / 'tiny.conf'
    path.write_text(TINY_CONF)
    return path


class TestMain:
    def test_single_run(self, tmp_path, conf):
        out = tmp_path / 'out'
        assert main(['--config', str(conf), '--out', str(out)]) == EXIT_OK
        checkpoint = read_file(out / 'stage1_2f.sfav1')
        assert checkpoint.config.num_frames == 2
        assert (out / 'stage1_2f_steps.csv').read_text().startswith('step,loss,lr\n')
        assert (out / 'stage1_2f_evals.csv').exists()
        manifest = (out / 'manifest.txt').read_text().splitlines()
        assert manifest[0] == 'preset = single_run'
        assert 'stage1_2f.sfav1' in manifest

    def test_reproducible(self, tmp_path, conf):
        assert main(['--config', str(conf), '--out', str(tmp_path / 'a'), '--seed', '4']) == EXIT_OK
        assert main(['--config', str(conf), '--out', str(tmp_path / 'b'), '--seed', '4']) == EXIT_OK
        a = (tmp_path / 'a' / 'stage1_2f.sfav1').read_bytes()
        b = (tmp_path / 'b' / 'stage1_2f.sfav1').read_bytes()
        assert a == b

    def test_stage2_from_init(self, tmp_path, conf):
        assert main(['--config', str(conf), '--out', str(tmp_path / 's1')]) == EXIT_OK
        init = tmp_path / 's1' / 'stage1_2f.sfav1'
        argv = ['--config', str(conf), '--out', str(tmp_path / 's2'), '--stage', '2', '--frames', '4',
                '--init', str(init), '--metrics-format', 'jsonl']
        assert main(argv) == EXIT_OK
        checkpoint = read_file(tmp_path / 's2' / 'stage2_4f.sfav1')
        assert checkpoint.meta['freeze']['spatial'] is True
        assert checkpoint.has_group('adapter')
        assert (tmp_path / 's2' / 'stage2_4f_steps.jsonl').exists()
        assert not (tmp_path / 's2' / 'stage2_4f_steps.csv').exists()

    def test_cost_table(self, tmp_path):
        out = tmp_path / 'cost'
        assert main(['--preset', 'cost_table6', '--out', str(out)]) == EXIT_OK
        header = (out / 'cost_table6_grid.csv').read_text().splitlines()[0]
        assert header.startswith('preset,mode,frames')
        assert (out / 'cost_table6_max_frames.csv').read_text().splitlines()[0] == 'preset,baseline,sfa'

    @pytest.mark.parametrize('argv', [
        ['--frames', '0'],
        ['--preset', 'table9'],
        ['--unknown-flag'],
        ['--stage', '2'],
        ['--init', 'nowhere.sfav1'],
    ])
    def test_config_errors(self, tmp_path, conf, argv):
        assert main(['--config', str(conf), '--out', str(tmp_path / 'out')] + argv) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(['--config', str(tmp_path / 'missing.conf'), '--out', str(tmp_path)]) == EXIT_CONFIG

    def test_corrupt_init(self, tmp_path, conf):
        init = tmp_path / 'broken.sfav1'
        init.write_bytes(b'SFAV1\x01')
        argv = ['--config', str(conf), '--out', str(tmp_path / 'out'), '--stage', '2', '--init', str(init)]
        assert main(argv) == EXIT_RUNTIME

    def test_help(self):
        assert main(['--help']) == EXIT_OK


@pytest.mark.slow
def test_desk_default_run(tmp_path):
    assert main(['--out', str(tmp_path)]) == EXIT_OK
    assert (tmp_path / 'stage1_8f.sfav1').exists()

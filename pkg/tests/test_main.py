"""Command-line parsing and the cheap subcommands."""
import pytest

from main import build_parser, main
from simulator import load_episode


class TestParser:

    def test_subcommand_is_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_batch_arguments(self):
        args = build_parser().parse_args(['run', '--episodes', '5', '--search', 'gt', '--max-goals', '2'])
        assert (args.episodes, args.search, args.max_goals, args.out) == (5, 'gt', 2, 'results')
        assert args.confidence is None
        assert args.openness_shuffles is None
        args = build_parser().parse_args(['run', '--openness-shuffles'])
        assert args.openness_shuffles is True

    def test_sweep_axis_is_checked(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['sweep', '--axis', 'speed', '--values', '1'])


class TestCommands:

    def test_generate_scenes(self, tmp_path, capsys):
        out = tmp_path / 'scenes'
        code = main(['generate-scenes', '--episodes', '2', '--seed', '7', '--room-size', '3.2',
                     '--object-count', '3', '--shuffle-count', '1', '--out', str(out)])
        assert code == 0
        assert load_episode(str(out / 'episode_00001.jsonl')).seed == 8
        assert 'Wrote 2 scene files' in capsys.readouterr().out

    def test_invalid_configuration_exits_with_error(self, capsys):
        assert main(['run', '--confidence', '2.0']) == 1
        assert 'Error' in capsys.readouterr().err

    def test_report_on_missing_directory(self, tmp_path):
        assert main(['report', '--out', str(tmp_path / 'nothing')]) == 1

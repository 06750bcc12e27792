"""
Integration tests for the command-line front end.

Commands run in-process through cli.main with a small descriptor written
to a temporary directory.
"""

import json
import os

import pytest

from cli import main
from tests.conftest import toy_descriptor


@pytest.fixture
def toy_file(tmp_path, test_config):
    path = tmp_path / 'toy.json'
    path.write_text(json.dumps(toy_descriptor()), encoding='utf-8')
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def error_response(err):
    """The JSON error document is the last line written to stderr."""
    return json.loads(err.strip().splitlines()[-1])


@pytest.mark.integration
class TestCliBasics:
    """Argument handling and exit codes."""

    def test_help_exits_cleanly(self, capsys):
        code, out, _ = run(capsys, '--help')
        assert code == 0
        assert 'tile-search' in out

    def test_unknown_command(self, capsys):
        code, _, _ = run(capsys, 'optimize', 'vgg19')
        assert code == 1

    def test_missing_network(self, capsys, tmp_path, test_config):
        code, _, err = run(capsys, 'analyze', str(tmp_path / 'absent.json'))
        assert code == 1
        response = error_response(err)
        assert response['success'] is False
        assert response['error_id'].startswith('ERR-')

    def test_empty_layer_list(self, capsys, tmp_path, test_config):
        path = tmp_path / 'empty.json'
        path.write_text(json.dumps(toy_descriptor(layers=[])), encoding='utf-8')
        code, _, err = run(capsys, 'analyze', str(path))
        assert code == 1
        assert 'no layers' in error_response(err)['error']

    def test_jobs_must_be_positive(self, capsys, toy_file):
        code, _, _ = run(capsys, '--jobs', '0', 'analyze', toy_file)
        assert code == 1

    def test_unknown_profile(self, capsys, toy_file):
        code, _, _ = run(capsys, '--config', 'no-such-profile', 'tile-search', toy_file)
        assert code == 1

    def test_infeasible_scratchpad(self, capsys, toy_file):
        code, _, err = run(capsys, 'tile-search', toy_file, '--spm-bytes', '128')
        assert code == 2
        assert '128 B' in error_response(err)['error']


@pytest.mark.integration
class TestCliCommands:
    """End-to-end command output on a toy network."""

    def test_analyze_table(self, capsys, toy_file):
        code, out, _ = run(capsys, 'analyze', toy_file)
        assert code == 0
        assert out.startswith('toy: ')
        assert 'TOTAL' in out
        assert '13560' in out

    def test_analyze_json_has_manifest(self, capsys, toy_file):
        code, out, _ = run(capsys, '--format', 'json', 'analyze', toy_file)
        assert code == 0
        document = json.loads(out)
        assert document['macs']['total'] == 13560
        manifest = document['manifest']
        assert toy_file in manifest['input_hashes']
        assert manifest['timestamp'] == '1970-01-01T00:00:00Z'
        assert manifest['config_paths'][0].endswith('paper-baseline.json')

    def test_analyze_csv_file(self, toy_file, temp_output_dir):
        out = os.path.join(temp_output_dir, 'toy.csv')
        assert main(['--format', 'csv', '--out', out, 'analyze', toy_file]) == 0
        with open(out, 'rb') as handle:
            text = handle.read().decode('utf-8')
        assert '\r' not in text
        assert text.startswith('# tool: smc-sim')
        assert 'layer,kind,in_shape' in text

    def test_schedule_table_and_simulate_chain(self, toy_file, temp_output_dir):
        schedule = os.path.join(temp_output_dir, 'toy.schedule.json')
        table = os.path.join(temp_output_dir, 'toy.table.json')
        report = os.path.join(temp_output_dir, 'toy.report.json')

        assert main(['--out', os.path.join(temp_output_dir, 'ts.txt'), 'tile-search', toy_file,
                     '--schedule-out', schedule]) == 0
        assert main(['--out', os.path.join(temp_output_dir, 'cal.txt'), 'calibrate', toy_file,
                     '--schedule', schedule, '--table-out', table, '--window', '2000']) == 0
        assert main(['--format', 'json', '--out', report, 'simulate', toy_file,
                     '--schedule', schedule, '--table', table]) == 0

        with open(report, encoding='utf-8') as handle:
            document = json.load(handle)
        assert document['report']['macs'] == 13560
        assert set(document['training']) == {'best', 'current'}
        assert document['energy']['placement'] == 'in-cube'
        assert set(document['manifest']['input_hashes']) >= {toy_file, schedule, table}
        assert os.path.isfile(os.path.join(temp_output_dir, 'toy.report.breakdown.csv'))

    def test_simulate_calibrates_by_default(self, capsys, toy_file):
        code, out, _ = run(capsys, '--format', 'csv', 'simulate', toy_file, '--window', '2000',
                           '--placement', 'host-side')
        assert code == 0
        body = [line for line in out.splitlines() if not line.startswith('#')]
        assert body[0].startswith('network,input,gmac')
        assert body[1].startswith('toy,')

    def test_calibrate_refreshes_table(self, toy_file, temp_output_dir):
        table = os.path.join(temp_output_dir, 'toy.table.json')
        report = os.path.join(temp_output_dir, 'toy.report.json')
        with open(table, 'w', encoding='utf-8') as handle:
            json.dump({'profile': 'stale', 'window': 1, 'entries': {}}, handle)

        assert main(['--format', 'json', '--out', report, 'simulate', toy_file,
                     '--table', table, '--calibrate', '--window', '2000']) == 0

        with open(table, encoding='utf-8') as handle:
            refreshed = json.load(handle)
        assert refreshed['window'] == 2000
        assert refreshed['entries']
        with open(report, encoding='utf-8') as handle:
            document = json.load(handle)
        assert table not in document['manifest']['input_hashes']

    def test_ratio_sweep_csv(self, capsys, toy_file):
        code, out, _ = run(capsys, '--format', 'csv', 'ratio-sweep', toy_file, 'conv1', '--tile', '4', '4')
        assert code == 0
        body = [line for line in out.splitlines() if not line.startswith('#')]
        assert body[0] == 'layer,t_ci,t_co,r_tcl,oi,est_cycles,feasible'
        assert len(body) == 1 + 9

    def test_ratio_sweep_fc_spans_input(self, capsys, toy_file):
        code, out, _ = run(capsys, '--format', 'json', 'ratio-sweep', toy_file, 'fc1')
        assert code == 0
        document = json.loads(out)
        assert (document['t_x'], document['t_y']) == (6, 5)
        assert document['best']['feasible'] is True

    @pytest.mark.parametrize('layer', ['pool1', 'conv9'])
    def test_ratio_sweep_needs_weighted_layer(self, capsys, toy_file, layer):
        code, _, err = run(capsys, 'ratio-sweep', toy_file, layer)
        assert code == 1
        assert layer in error_response(err)['error']

    def test_roofline_rows(self, capsys, toy_file):
        code, out, _ = run(capsys, '--format', 'json', 'roofline', toy_file, '--points', '5',
                           '--window', '2000')
        assert code == 0
        document = json.loads(out)
        assert document['ridge_flop_per_byte'] > 0
        rows = document['rows']
        assert len(rows) == 6
        assert all(row['roof_fraction'] == 1.0 for row in rows[:5])
        assert rows[-1]['network'] == 'toy'
        assert 0.0 < rows[-1]['roof_fraction'] <= 1.0

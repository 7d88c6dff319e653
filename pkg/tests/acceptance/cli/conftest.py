"""
Step definitions shared by the command-line feature files.
"""

import json

import pandas as pd
import pytest
from pytest_bdd import given, parsers, then, when

import cli
from tests.config import get_test_data_path


@pytest.fixture
def context():
    """Shared context between steps"""
    return {"overrides": [], "runs": []}


def _run(context, tmp_path, capsys, scenario):
    out = tmp_path / f"run-{len(context['runs'])}"
    argv = [context["command"], "--scenario", str(scenario), "--out", str(out)]
    for item in context["overrides"]:
        argv += ["--set", item]
    context["exit_code"] = cli.main(argv)
    context["stderr"] = capsys.readouterr().err
    context["runs"].append(out)


@given(parsers.parse('the scenario file "{filename}"'))
def scenario_file(context, filename):
    context["scenario"] = get_test_data_path(filename)


@given(parsers.parse('the setting "{key}" is "{value}"'))
def setting(context, key, value):
    context["overrides"].append(f"{key}={value}")


@when(parsers.parse('I run the "{command}" command'))
def run_command(context, command, tmp_path, capsys):
    context["command"] = command
    _run(context, tmp_path, capsys, context["scenario"])


@when(parsers.parse('I run the "{command}" command again from the resolved configuration'))
def rerun_from_resolved_config(context, command, tmp_path, capsys):
    context["command"] = command
    context["overrides"] = []
    _run(context, tmp_path, capsys, context["runs"][-1] / "resolved-config.json")


@then(parsers.parse("the exit code should be {code:d}"))
def check_exit_code(context, code):
    assert context["exit_code"] == code, context["stderr"]


@then(parsers.parse('the run directory should contain "{filename}"'))
def run_directory_contains(context, filename):
    assert (context["runs"][-1] / filename).is_file()


@then(parsers.parse('the summary should report "{verdict}"'))
def summary_verdict(context, verdict):
    with open(context["runs"][-1] / "run-summary.json", encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["results"]["dominance_verdict"] == verdict


@then(parsers.parse("every hourly dominance delta should be within {tol}"))
def dominance_deltas_within(context, tol):
    tol = float(tol)
    frame = pd.read_csv(context["runs"][-1] / "dominance.csv")
    assert frame["delta"].abs().max() <= tol


@then(parsers.parse('the file "{filename}" should have {rows:d} rows'))
def file_row_count(context, filename, rows):
    assert len(pd.read_csv(context["runs"][-1] / filename)) == rows


@then(parsers.parse("the tracking log should be disturbed from day {day:d}"))
def disturbed_from(context, day):
    frame = pd.read_csv(context["runs"][-1] / "tracking.csv")
    assert frame.loc[frame["disturbed"], "day"].min() == day
    assert not frame.loc[frame["day"] < day, "disturbed"].any()


@then(parsers.parse('both runs should have written identical "{filename}" files'))
def identical_outputs(context, filename):
    first, second = context["runs"][-2:]
    assert (first / filename).read_bytes() == (second / filename).read_bytes()


@then(parsers.parse('the error output should mention "{text}"'))
def error_mentions(context, text):
    assert text in context["stderr"]

import numpy as np
import pytest

from mmsada import config as cf
from mmsada.synthdata import ConfigError

RUN = """\
method = adabn        # trailing comment
source_domain = D1
target_domain = D3
seed = 7
stage1_lr = 0.005
unbiased_mmd = yes

[data]
prototype_seed = 4
rgb_noise = 1.25

[domain D1]
seed = 11
class_count = 3
class_prior = 0.5, 0.25, 0.25

[domain D3]
seed = 13
class_count = 3
appearance_strength = 0.1
"""


def test_parse_run_config():
    rc = cf.parse_run_config(RUN)
    assert rc.experiment.method == "adabn" and rc.experiment.seed == 7
    assert rc.experiment.stage1_lr == 0.005 and rc.experiment.unbiased_mmd is True
    assert rc.prototype_seed == 4 and rc.generator.rgb_noise == 1.25
    assert [d.domain_id for d in rc.domains] == ["D1", "D3"]
    np.testing.assert_array_equal(rc.domains[0].class_prior, [0.5, 0.25, 0.25])
    assert rc.domains[1].class_prior is None and rc.domains[1].appearance_strength == 0.1


def test_default_domains_when_none_declared():
    rc = cf.parse_run_config("method = mm-sada\nsource_domain = D2\ntarget_domain = D3\n")
    assert [d.domain_id for d in rc.domains] == ["D1", "D2", "D3"]


def test_round_trip():
    rc = cf.parse_run_config(RUN)
    text = cf.format_run_config(rc)
    again = cf.parse_run_config(text)
    assert cf.format_run_config(again) == text
    assert again.experiment == rc.experiment and again.generator == rc.generator


@pytest.mark.parametrize("key", cf.REQUIRED_KEYS)
def test_missing_required_key_is_named(key):
    text = "\n".join(l for l in RUN.splitlines() if not l.startswith(key))
    with pytest.raises(ConfigError, match=key):
        cf.parse_run_config(text)


@pytest.mark.parametrize("bad, line", [
    ("stage1_lr = fast", 5),
    ("bogus = 1", 5),
    ("just words", 5),
    ("[weird]", 5),
    ("[data", 5),
    ("seed = 1", 5),
])
def test_parse_errors_name_the_line(bad, line):
    lines = RUN.splitlines()
    lines[4] = bad
    with pytest.raises(cf.ConfigParseError) as err:
        cf.parse_run_config("\n".join(lines), "x.cfg")
    assert err.value.lineno == line and str(err.value).startswith(f"x.cfg:{line}:")


def test_domain_without_seed():
    with pytest.raises(cf.ConfigParseError, match="seed"):
        cf.parse_run_config(RUN.replace("seed = 13\n", ""))


def test_undeclared_domain():
    with pytest.raises(ConfigError, match="D2"):
        cf.parse_run_config(RUN.replace("target_domain = D3", "target_domain = D2"))


def test_duplicate_domain():
    with pytest.raises(cf.ConfigParseError, match="twice"):
        cf.parse_run_config(RUN + "\n[domain D1]\nseed = 1\n")


def test_bad_prior():
    with pytest.raises(ConfigError):
        cf.parse_run_config(RUN.replace("0.5, 0.25, 0.25", "0.5, 0.5, 0.5"))


def test_invalid_value_rejected():
    with pytest.raises(ConfigError):
        cf.parse_run_config(RUN.replace("method = adabn", "method = magic"))


# ---------------------------------------------------------------- suites

def test_suite_defaults():
    s = cf.parse_suite("methods = source-only, mm-sada\n")
    assert s.methods == ["source-only", "mm-sada"]
    assert len(s.pairs) == 6 and ("D3", "D1") in s.pairs
    assert s.seeds == [0, 1, 2] and s.sweep == "none"


def test_suite_sweeps():
    s = cf.parse_suite("methods = mm-sada\npairs = D1>D2\nsweep = lambda_d\nsweep_values = 0.1, 1\n")
    assert s.sweep_values == [0.1, 1.0] and s.pairs == [("D1", "D2")]
    s = cf.parse_suite("methods = mm-sada\nsweep = policy\n")
    assert s.sweep_values == ["sync", "seg_corr"]


@pytest.mark.parametrize("text", [
    "pairs = D1>D2\n",
    "methods = nope\n",
    "methods = mm-sada\npairs = D1-D2\n",
    "methods = mm-sada\npairs = D1>D1\n",
    "methods = mm-sada\nseeds = a\n",
    "methods = mm-sada\nsweep = dropout\nsweep_values = 0.1\n",
    "methods = mm-sada\nsweep = lambda_d\n",
])
def test_bad_suites(text):
    with pytest.raises(ConfigError):
        cf.parse_suite(text)

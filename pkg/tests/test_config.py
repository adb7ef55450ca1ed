import warnings

import pytest

from selfcon_lab.config import ConfigError, TrainConfig, load_config, parse_config
from selfcon_lab.encoder import ExitSpec
from selfcon_lab.losses import LossKind


class TestParsing:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg.loss.kind is LossKind.SELFCON_S
        assert cfg.loss.tau == 0.1 and cfg.loss.alpha == 1.0
        assert cfg.optim.lr == 0.05 and cfg.optim.momentum == 0.9 and cfg.optim.weight_decay == 1e-4
        assert cfg.batch_size == 64 and cfg.beta == 1.0 and cfg.linear.lr == 0.5
        assert cfg.encoder.exits == (ExitSpec(2, "small"),)
        assert cfg.bank.capacity == 1024 and not cfg.bank.enabled

    def test_spec_style_keys(self):
        cfg = parse_config("loss.kind=selfcon-s\nloss.tau=0.1\nloss.alpha=1.0\n"
                           "encoder.exits=2:small\nbank.capacity=1024\n")
        assert cfg.loss.kind is LossKind.SELFCON_S and cfg.bank.capacity == 1024

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# a comment\n\n  seed = 7  \n")
        assert cfg.seed == 7

    def test_unsupervised_tau_default(self):
        assert parse_config("loss.kind=ntxent").loss.tau == 0.5
        assert parse_config("loss.kind=ntxent\nloss.tau=0.2").loss.tau == 0.2

    def test_exit_list(self):
        cfg = parse_config("encoder.exits=1:fc,3:same")
        assert cfg.encoder.exits == (ExitSpec(1, "fc"), ExitSpec(3, "same"))
        assert parse_config("encoder.exits=none").encoder.exits == ()

    def test_round_trip_text(self):
        cfg = parse_config("loss.kind=selfcon-m\nloss.alpha=0.6\nencoder.exits=1:fc,2:small\n"
                           "probe.pairs=F;T2,X;F\nencoder.widths=32,32,16")
        again = parse_config(cfg.to_text())
        assert again.to_text() == cfg.to_text()
        assert again.config_hash == cfg.config_hash

    def test_hash_changes_with_values(self):
        assert parse_config("seed=1").config_hash != parse_config("seed=2").config_hash

    def test_replace(self):
        cfg = parse_config("").replace(**{"loss.alpha": 0.2, "seed": 3})
        assert cfg.loss.alpha == 0.2 and cfg.seed == 3

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_overrides(self, tmp_path):
        (tmp_path / "a.cfg").write_text("seed=1\n")
        assert load_config(tmp_path / "a.cfg", {"seed": "5"}).seed == 5


class TestValidation:
    @pytest.mark.parametrize("text", [
        "loss.temperature=0.1",
        "optim.lr=0",
        "loss.tau=-1",
        "linear.lr=0",
        "train.protocol=three-stage",
        "loss.kind=banana",
        "seed=abc",
        "encoder.exits=4:small",
        "encoder.exits=2:tiny",
        "encoder.exits=1:fc,1:same",
        "data.classes=30",
        "bank.enabled=true\nloss.kind=supcon",
        "bank.enabled=maybe",
        "train.protocol=one-stage\nloss.kind=supcon-s",
        "loss.kind=selfcon-su",
        "no_equals_sign",
        "encoder.init=xavier",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_selfcon_su_opt_in_warns(self):
        with pytest.warns(UserWarning, match="converge"):
            cfg = parse_config("loss.kind=selfcon-su\nloss.allow_selfcon_su=true")
        assert cfg.loss.kind is LossKind.SELFCON_SU

    def test_bank_single_view_ok(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert parse_config("bank.enabled=true\nloss.kind=supcon-s").bank.enabled

    def test_default_instance_validates(self):
        assert TrainConfig().validate() is not None


class TestRoundTripEmpty:
    def test_no_pairs_no_exits(self):
        cfg = parse_config("encoder.exits=none\nloss.kind=supcon")
        again = parse_config(cfg.to_text())
        assert again.probe.pairs == () and again.encoder.exits == ()

import pytest
from hypothesis import given, strategies as st

from httpa2 import fields as sf

tokens = st.from_regex(r"[A-Za-z][A-Za-z0-9.\-_]{0,12}", fullmatch=True).map(sf.Token)
keys = st.from_regex(r"[a-z][a-z0-9\-]{0,8}", fullmatch=True)
strings = st.text(st.characters(min_codepoint=0x20, max_codepoint=0x7E), max_size=20)
bare = st.one_of(st.binary(max_size=40), st.integers(-(10**15) + 1, 10**15 - 1), st.booleans(), tokens, strings)
items = st.builds(sf.Item, bare, st.dictionaries(keys, bare, max_size=3))


@given(st.binary(max_size=200))
def test_b64url_round_trip(data):
    text = sf.b64url_encode(data)
    assert "=" not in text
    assert sf.b64url_decode(text) == data


@pytest.mark.parametrize("bad", ["ab=", "a", "a+b/", "Zh"])
def test_b64url_rejects_noncanonical(bad):
    with pytest.raises(sf.FieldSyntaxError):
        sf.b64url_decode(bad)


@given(items)
def test_item_round_trip(item):
    assert sf.parse_item(sf.serialize_item(item)) == item


@given(st.lists(items, max_size=5))
def test_list_round_trip(lst):
    assert sf.parse_list(sf.serialize_list(lst)) == lst


@given(st.dictionaries(keys, items, min_size=1, max_size=4))
def test_dict_round_trip(d):
    assert sf.parse_dict(sf.serialize_dict(d)) == d


def test_byte_sequence_and_params():
    item = sf.parse_item(":AQID:;group=x25519;max-age=60")
    assert item.value == b"\x01\x02\x03"
    assert item.param("group") == "x25519" and isinstance(item.param("group"), sf.Token)
    assert item.param("max-age") == 60


def test_mixed_case_dict_keys():
    d = sf.parse_dict("attestation=direct, allowUntrustedReq=?0")
    assert d["allowUntrustedReq"].value is False


def test_bare_true_parameter():
    assert sf.serialize_item(sf.Item(sf.Token("a"), {"flag": True})) == "a;flag"
    assert sf.parse_item("a;flag").param("flag") is True


@pytest.mark.parametrize("text", ["", ":abc", "\"unterminated", "a;", "(a b)", "1 2", "99999999999999999"])
def test_malformed_items(text):
    with pytest.raises(sf.FieldSyntaxError):
        sf.parse_item(text)


def test_parse_field_dispatch():
    assert sf.parse_field("a, b", "list") == [sf.Item(sf.Token("a")), sf.Item(sf.Token("b"))]
    with pytest.raises(ValueError):
        sf.parse_field("a", "nope")

import hashlib
import json

import httpx
import pytest

from kgqagen.config import LlmConfig
from kgqagen.errors import ConfigError, FormatError, ProviderError, ScriptExhaustedError
from kgqagen.models import EntityRef, Insufficient, Subgraph, Sufficient
from kgqagen.services import llm_gateway
from kgqagen.services.http import RetryPolicy
from kgqagen.services.llm_gateway import (
  HttpProvider,
  ScriptedProvider,
  ask,
  fingerprint,
  format_triples,
  parse_generation_response,
  parse_judge_response,
  parse_revision_response,
  render_generator_prompt,
  render_judge_prompt,
  render_validator_prompt,
  serialize_generation_outcome,
  strip_fence,
  user_request,
)

# Pinned so any prompt edit is a deliberate, reviewed change.
TEMPLATE_SHA256 = {
  'generator': 'f36d17184d2abe3158f34955ba8ce8621c49f8a036a221de3490b22e79bacdb9',
  'revision': 'beec8b9314307cf6d322d25b75d9574cc0ae91a5c26d07305538ac60b61164e2',
  'judge': '237de1291c2b0c58510046e11681058f68c2e8d0c03b4a471fe1b1f2ca495061',
}


def _subgraph(store, qid):
  return Subgraph(seed=EntityRef(label=store.label(qid), qid=qid), triples=store.neighbors(qid))


# ============================================================================
# PROMPTS
# ============================================================================


@pytest.mark.parametrize('name', sorted(TEMPLATE_SHA256))
def test_templates_are_pinned(name):
  text = llm_gateway.load_template(name)
  assert hashlib.sha256(text.encode('utf-8')).hexdigest() == TEMPLATE_SHA256[name]


def test_generator_prompt_embeds_triples_once(store):
  subgraph = _subgraph(store, 'Q12712')
  prompt = render_generator_prompt(subgraph)
  block = (
    '[\n'
    '  ["Johann Martin Schleyer (Q12712)", "nominated for (P1411)", '
    '"Nobel Peace Prize (Q35637)"],\n'
    '  ["Johann Martin Schleyer (Q12712)", "place of birth (P19)", "Oberlauda (Q885402)"],\n'
    '  ["International Volapük Academy (Q3358168)", "founded by (P112)", '
    '"Johann Martin Schleyer (Q12712)"]\n'
    ']'
  )
  assert format_triples(subgraph.triples) == block
  assert prompt == llm_gateway.load_template('generator').replace('{triples}', block)
  assert '{triples}' not in prompt
  assert prompt.count('Return strict JSON only') == 1


def test_generator_prompt_is_deterministic(store):
  subgraph = _subgraph(store, 'Q752075')
  assert render_generator_prompt(subgraph) == render_generator_prompt(subgraph)


def test_generator_prompt_rejects_empty_subgraph():
  with pytest.raises(ValueError):
    render_generator_prompt(Subgraph(seed=EntityRef(label='x', qid='Q1'), triples=[]))


def test_substituted_text_is_not_rescanned():
  prompt = render_validator_prompt('What is {sparql}?', 'SELECT ?x WHERE { ?x wdt:P1 wd:Q1 }')
  assert 'What is {sparql}?' in prompt
  assert 'SELECT ?x WHERE { ?x wdt:P1 wd:Q1 }' in prompt
  assert '"correct_sparql"' in prompt


@pytest.mark.parametrize('question,query', [('', 'SELECT ?x'), ('Who?', '   ')])
def test_validator_prompt_rejects_blank_inputs(question, query):
  with pytest.raises(ValueError):
    render_validator_prompt(question, query)


def test_judge_prompt_fills_all_fields():
  prompt = render_judge_prompt('Which currency?', 'AUD', 'Australian dollar (Q259502)')
  assert 'Which currency?' in prompt
  assert 'Predicted answer: AUD' in prompt
  assert 'Reference answer: Australian dollar (Q259502)' in prompt


# ============================================================================
# RESPONSE PARSING
# ============================================================================


def test_parse_example_outputs(responses):
  first = parse_generation_response(responses['example_1'])
  assert isinstance(first, Sufficient)
  assert first.answers == ['Johann Martin Schleyer (Q12712)']
  assert len(first.proof) == 2

  second = parse_generation_response(responses['example_2'])
  assert second == Insufficient(candidates=['Q33541', 'Q489898', 'Q238931'])

  third = parse_generation_response(responses['example_3'])
  assert third.answers == ['Astronomy and Astrophysics (Q752075)']
  assert len(third.proof) == 3


def test_parse_normalizes_and_dedups_candidates():
  outcome = parse_generation_response(
    '{"sufficient": false, "candidate": ["Karakalpak (Q33541)", "Q33541", " Q265 "]}'
  )
  assert outcome.candidates == ['Q33541', 'Q265']


def test_parse_strips_code_fence(responses):
  fenced = '```json\n' + responses['example_2'] + '\n```'
  assert parse_generation_response(fenced) == parse_generation_response(responses['example_2'])


def test_strip_fence_leaves_plain_text():
  assert strip_fence('  {"a": 1}  ') == '{"a": 1}'
  assert strip_fence('```\n{"a": 1}\n```') == '{"a": 1}'


@pytest.mark.parametrize(
  'text',
  [
    'Sure! Here is the JSON.',
    '[]',
    '{"sufficient": "yes"}',
    '{"sufficient": false, "candidate": []}',
    '{"sufficient": false, "candidate": ["Paris"]}',
    '{"sufficient": true, "question": "", "answer": ["a"], "proof": [["a", "b", "c"]]}',
    '{"sufficient": true, "question": "Who?", "answer": [], "proof": [["a", "b", "c"]]}',
    '{"sufficient": true, "question": "Who?", "answer": ["a"], "proof": []}',
    '{"sufficient": true, "question": "Who?", "answer": ["a"], "proof": [["a", "b"]]}',
    '{"sufficient": true, "question": "Who?", "answer": [1], "proof": [["a", "b", "c"]]}',
  ],
)
def test_parse_rejects_contract_violations(text):
  with pytest.raises(FormatError):
    parse_generation_response(text)


def test_serialize_generation_outcome_parses_back(responses):
  for name in ('example_1', 'example_2', 'example_3'):
    outcome = parse_generation_response(responses[name])
    assert parse_generation_response(serialize_generation_outcome(outcome)) == outcome


def test_parse_revision_response():
  revision = parse_revision_response('{"correct_sparql": " SELECT ?x WHERE { ?x wdt:P1 ?y } "}')
  assert revision.correct_sparql == 'SELECT ?x WHERE { ?x wdt:P1 ?y }'
  for bad in ('{}', '{"correct_sparql": ""}', '{"correct_sparql": "q", "note": "x"}', 'nope'):
    with pytest.raises(FormatError):
      parse_revision_response(bad)


@pytest.mark.parametrize(
  'text,verdict', [('yes', True), ('Yes.', True), ('NO', False), ('"no" - different', False)]
)
def test_parse_judge_response(text, verdict):
  assert parse_judge_response(text) is verdict


def test_parse_judge_response_rejects_other_words():
  with pytest.raises(FormatError):
    parse_judge_response('maybe')


# ============================================================================
# PROVIDERS
# ============================================================================


def test_scripted_queue_replays_in_order_and_records_calls():
  provider = ScriptedProvider(['one', 'two'])
  request = user_request('m', 'hello')
  assert provider.complete(request) == 'one'
  assert provider.complete(request) == 'two'
  assert len(provider.calls) == 2
  assert provider.remaining() == 0
  with pytest.raises(ScriptExhaustedError):
    provider.complete(request)


def test_scripted_table_keys_on_prompt_fingerprint():
  first, second = user_request('m', 'first prompt'), user_request('m', 'second prompt')
  provider = ScriptedProvider({fingerprint(first): 'A', fingerprint(second): ['B1', 'B2']})
  assert provider.complete(second) == 'B1'
  assert provider.complete(first) == 'A'
  assert provider.complete(second) == 'B2'
  assert not provider.is_queue
  with pytest.raises(ScriptExhaustedError):
    provider.complete(first)


def test_fingerprint_ignores_model_and_temperature():
  assert fingerprint(user_request('a', 'p', 0.0)) == fingerprint(user_request('b', 'p', 1.0))
  assert fingerprint(user_request('a', 'p')) == hashlib.sha256(b'p').hexdigest()


def test_scripted_provider_from_file(tmp_path):
  path = tmp_path / 'script.json'
  path.write_text(json.dumps(['x']), encoding='utf-8')
  assert ScriptedProvider.from_file(path).is_queue
  path.write_text('3', encoding='utf-8')
  with pytest.raises(ValueError):
    ScriptedProvider.from_file(path)


def test_ask_reasks_once_then_succeeds():
  provider = ScriptedProvider(['not json', '{"correct_sparql": "SELECT ?x"}'])
  revision = ask(provider, user_request('m', 'p'), parse_revision_response, reasks=1)
  assert revision.correct_sparql == 'SELECT ?x'
  assert len(provider.calls) == 2


def test_ask_raises_after_second_malformed_output():
  provider = ScriptedProvider(['bad', 'worse', 'never read'])
  with pytest.raises(FormatError):
    ask(provider, user_request('m', 'p'), parse_revision_response, reasks=1)
  assert len(provider.calls) == 2


def _chat_handler(seen):
  def handler(request: httpx.Request) -> httpx.Response:
    seen.append(request)
    return httpx.Response(200, json={'choices': [{'message': {'content': 'yes'}}]})

  return handler


def test_http_provider_posts_chat_completion():
  seen = []
  provider = HttpProvider(
    'https://llm.example.org/v1/',
    'sk-test',
    transport=httpx.MockTransport(_chat_handler(seen)),
    sleep=lambda _: None,
  )
  assert provider.complete(user_request('gpt-4o-mini', 'Same?', 0.0)) == 'yes'
  request = seen[0]
  assert str(request.url) == 'https://llm.example.org/v1/chat/completions'
  assert request.headers['Authorization'] == 'Bearer sk-test'
  body = json.loads(request.content)
  assert body == {
    'model': 'gpt-4o-mini',
    'messages': [{'role': 'user', 'content': 'Same?'}],
    'temperature': 0.0,
  }


def test_http_provider_rejects_unexpected_payload():
  provider = HttpProvider(
    'https://llm.example.org/v1',
    'sk-test',
    policy=RetryPolicy(max_attempts=1),
    transport=httpx.MockTransport(lambda request: httpx.Response(200, json={'choices': []})),
  )
  with pytest.raises(ProviderError):
    provider.complete(user_request('m', 'p'))


def test_http_provider_reads_key_from_environment(monkeypatch):
  monkeypatch.setenv('KGQAGEN_TEST_API_KEY', 'sk-env')
  seen = []
  provider = HttpProvider.from_config(
    LlmConfig(api_key_env='KGQAGEN_TEST_API_KEY', base_url='https://llm.example.org/v1'),
    transport=httpx.MockTransport(_chat_handler(seen)),
  )
  provider.complete(user_request('m', 'p'))
  assert seen[0].headers['Authorization'] == 'Bearer sk-env'


def test_http_provider_without_key_is_config_error(monkeypatch):
  monkeypatch.delenv('KGQAGEN_MISSING_KEY', raising=False)
  with pytest.raises(ConfigError):
    HttpProvider.from_config(LlmConfig(api_key_env='KGQAGEN_MISSING_KEY'))

"""Shared fixtures: a toy corpus, a routing scripted backend, replay transcripts."""

from itertools import permutations

from sure_qa import prompts
from sure_qa.backend import ChatRequest, ReplayBackend, ScriptedBackend, Transcript
from sure_qa.bm25 import build_index, retrieve
from sure_qa.corpus import Corpus, Passage
from sure_qa.evaluation import QAExample

MODEL = "replay-model"

CORPUS = Corpus.from_passages([
    Passage("p1", "Paris", "Paris is the capital and largest city of France."),
    Passage("p2", "Lyon", "Lyon is the third largest city of France."),
    Passage("p3", "Hamlet", "Hamlet is a tragedy written by William Shakespeare."),
    Passage("p4", "Marlowe", "Christopher Marlowe was a playwright, a contemporary of Shakespeare."),
    Passage("p5", "Everest", "Mount Everest is the highest mountain above sea level."),
    Passage("p6", "K2", "K2 is the second highest mountain on Earth."),
    Passage("p7", "Danube", "The Danube flows through Vienna and Budapest."),
])

INDEX = build_index(CORPUS)


def stage_of(prompt: str) -> str:
    if prompt.startswith("Below are"):
        return "candidates"
    if prompt.startswith("Question: Given the following passages"):
        return "ranking"
    if prompt.endswith("Choices: [True, False]. Answer:"):
        return "validity"
    if prompt.endswith("Passage:"):
        return "summarize"
    return "baseline"


def router(responses: dict, default: str = "") -> ScriptedBackend:
    """Scripted backend answering by stage; values may be callables of the prompt."""

    def fn(request: ChatRequest) -> str:
        prompt = request.prompt_echo
        value = responses.get(stage_of(prompt), default)
        return value(prompt) if callable(value) else value

    return ScriptedBackend(fn, model=MODEL)


def build_transcript(question, n, cand_response, candidates, summaries, validity, ranking, k=2,
                     transcript=None, corpus=CORPUS, index=INDEX):
    """Key every SuRe request for ``question`` by hand.

    ``validity`` holds one reply per candidate; ``ranking`` maps the ordered
    pair ``(a, b)`` (a shown as Passage 1) to the reply.
    """
    transcript = Transcript() if transcript is None else transcript
    passages = retrieve(index, corpus, question, n).passages

    def add(prompt, response):
        transcript.add(ChatRequest.user(MODEL, prompt), response)

    add(prompts.render_candidate_prompt(question, passages, k), cand_response)
    for i, s in enumerate(summaries):
        add(prompts.render_summarization_prompt(question, passages, candidates, i), s)
        add(prompts.render_validity_prompt(question, candidates[i], s.replace(" [DONE]", "")), validity[i])
    clean = [s.replace(" [DONE]", "") for s in summaries]
    for a, b in permutations(range(len(clean)), 2):
        add(prompts.render_ranking_prompt(question, clean[a], clean[b]), ranking[(a, b)])
    return transcript


# Three questions with hand-executed selection walks.
SCRIPTED = [
    {
        # Validity decides: v=(1,0), position-biased judge gives rank=(0.5,0.5).
        "id": "q-valid",
        "question": "What is the capital of France?",
        "answers": ["Paris"],
        "cand_response": "(a) Paris, (b) Lyon",
        "candidates": ["Paris", "Lyon"],
        "summaries": ["Paris is the capital of France. [DONE]", "Lyon is a large French city. [DONE]"],
        "validity": ["True", "False"],
        "ranking": {(0, 1): "Passage 1", (1, 0): "Passage 1"},
        "expect": {"validity": [1, 0], "rank": [0.5, 0.5], "scores": [1.5, 0.5], "chosen": 0, "answer": "Paris"},
    },
    {
        # Ranking decides: both valid, summary 2 preferred in both orders.
        "id": "q-rank",
        "question": "Who wrote the tragedy Hamlet?",
        "answers": ["William Shakespeare", "Shakespeare"],
        "cand_response": "(a) Christopher Marlowe, (b) William Shakespeare",
        "candidates": ["Christopher Marlowe", "William Shakespeare"],
        "summaries": ["Marlowe wrote plays in the same era.", "Hamlet was written by William Shakespeare."],
        "validity": ["True", "True"],
        "ranking": {(0, 1): "Passage 2", (1, 0): "Passage 1"},
        "expect": {"validity": [1, 1], "rank": [0.0, 1.0], "scores": [1.0, 2.0], "chosen": 1,
                   "answer": "William Shakespeare"},
    },
    {
        # Exact tie: equal validity, judge answers neither; earlier candidate wins.
        "id": "q-tie",
        "question": "What is the highest mountain?",
        "answers": ["Mount Everest", "Everest"],
        "cand_response": "(a) Mount Everest (b) K2",
        "candidates": ["Mount Everest", "K2"],
        "summaries": ["Everest is the highest mountain.", "K2 is a very high mountain."],
        "validity": ["False", "false"],
        "ranking": {(0, 1): "Both are equally informative.", (1, 0): "I cannot decide."},
        "expect": {"validity": [0, 0], "rank": [0.5, 0.5], "scores": [0.5, 0.5], "chosen": 0,
                   "answer": "Mount Everest"},
    },
]


def scripted_transcript(n=3):
    transcript = Transcript()
    for case in SCRIPTED:
        build_transcript(case["question"], n, case["cand_response"], case["candidates"], case["summaries"],
                         case["validity"], case["ranking"], transcript=transcript)
    return transcript


def scripted_dataset():
    return [QAExample(c["id"], c["question"], tuple(c["answers"])) for c in SCRIPTED]


def replay_backend(transcript):
    return ReplayBackend(transcript, model=MODEL)


# (prediction, golds) pairs scored against the reference evaluator.
METRIC_FIXTURE = [
    ("Barack Obama", ["Obama"]),
    ("Obama", ["Barack Obama"]),
    ("the Eiffel Tower", ["Eiffel Tower"]),
    ("An apple", ["apple"]),
    ("A", ["a"]),
    ("The The", ["the"]),
    ("Paris.", ["paris"]),
    ("  Paris ,  France ", ["Paris France"]),
    ("William Shakespeare", ["Shakespeare", "William Shakespeare"]),
    ("Shakespeare", ["Christopher Marlowe"]),
    ("1,000", ["1000"]),
    ("Mount Everest", ["Everest", "Mt. Everest"]),
    ("New York City", ["New York"]),
    ("the cat the cat", ["cat"]),
    ("", ["Paris"]),
    ("Paris", [""]),
    ("", [""]),
    ("theatre", ["the atre"]),
    ("an answer", ["answer an"]),
    ("U.S.A.", ["USA"]),
    ("Zürich", ["zurich"]),
    ("Café", ["café"]),
    ("Rock 'n' roll", ["rock n roll"]),
    ("blue red blue", ["blue blue red red"]),
    ("King George III", ["George III", "King George"]),
    ("1 2 3", ["3 2 1"]),
]

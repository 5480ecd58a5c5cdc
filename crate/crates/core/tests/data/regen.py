"""Regenerates the bundled test fixtures. Run from this directory: python3 regen.py"""
import json
import math
import os
import re
import sqlite3

HERE = os.path.dirname(os.path.abspath(__file__))


def path(name):
    return os.path.join(HERE, name)


SCHEMA = """
CREATE TABLE patients (
    subject_id INTEGER PRIMARY KEY,
    gender TEXT NOT NULL,
    anchor_age INTEGER,
    dod TEXT
);
CREATE TABLE admissions (
    hadm_id INTEGER PRIMARY KEY,
    subject_id INTEGER NOT NULL REFERENCES patients(subject_id),
    admittime TEXT,
    dischtime TEXT,
    admission_type TEXT,
    insurance TEXT
);
CREATE TABLE labevents (
    row_id INTEGER PRIMARY KEY,
    subject_id INTEGER NOT NULL REFERENCES patients(subject_id),
    hadm_id INTEGER REFERENCES admissions(hadm_id),
    itemid INTEGER,
    charttime TEXT,
    valuenum REAL,
    valueuom TEXT
);
"""

PATIENTS = [
    (10001, "M", 71, "2180-03-02"),
    (10002, "F", 54, None),
    (10003, "M", 66, None),
    (10004, "F", 39, None),
    (10005, "M", 82, "2179-11-20"),
    (10006, "F", 47, None),
    (10007, "F", 29, None),
    (10008, "M", 58, None),
    (10009, "F", 61, None),
    (10010, "M", 75, None),
]

ADMISSIONS = [
    (20001, 10001, "2178-01-03 10:00:00", "2178-01-09 12:00:00", "EMERGENCY", "Medicare"),
    (20002, 10001, "2179-05-11 08:30:00", "2179-05-15 14:00:00", "ELECTIVE", "Medicare"),
    (20003, 10002, "2177-02-20 22:10:00", "2177-02-27 11:00:00", "EMERGENCY", "Private"),
    (20004, 10003, "2176-07-01 09:00:00", "2176-07-04 10:00:00", "URGENT", "Medicare"),
    (20005, 10003, "2177-08-15 13:20:00", "2177-08-22 16:45:00", "EMERGENCY", "Medicare"),
    (20006, 10003, "2178-12-30 23:50:00", "2179-01-05 09:30:00", "EMERGENCY", "Medicare"),
    (20007, 10004, "2180-04-02 07:15:00", "2180-04-03 12:00:00", "ELECTIVE", "Private"),
    (20008, 10005, "2179-10-01 18:00:00", "2179-11-20 05:00:00", "EMERGENCY", "Medicare"),
    (20009, 10006, "2175-06-12 11:11:00", "2175-06-18 15:00:00", "URGENT", "Medicaid"),
    (20010, 10007, "2181-01-19 06:40:00", "2181-01-21 10:20:00", "EMERGENCY", "Private"),
    (20011, 10008, "2176-03-03 03:03:00", "2176-03-10 13:00:00", "EMERGENCY", "Other"),
    (20012, 10009, "2177-09-09 09:09:00", "2177-09-12 12:12:00", "ELECTIVE", "Private"),
    (20013, 10009, "2179-02-14 14:00:00", "2179-02-20 08:00:00", "URGENT", "Private"),
    (20014, 10010, "2178-11-11 11:00:00", "2178-11-19 17:30:00", "EMERGENCY", "Medicare"),
    (20015, 10010, "2180-08-08 08:00:00", "2180-08-09 09:00:00", "ELECTIVE", "Medicare"),
]

ITEMS = [(50912, "mg/dL"), (50971, "mEq/L"), (51221, "%")]


def labevents():
    rows = []
    row_id = 1
    for i, (hadm_id, subject_id, admit, *_rest) in enumerate(ADMISSIONS):
        for j, (itemid, uom) in enumerate(ITEMS):
            if (i + j) % 4 == 3:
                continue
            base = {50912: 0.9, 50971: 4.1, 51221: 36.0}[itemid]
            value = round(base + ((i * 7 + j * 3) % 10) * 0.1 * (1 if itemid != 51221 else 10), 2)
            rows.append((row_id, subject_id, hadm_id, itemid, admit, value, uom))
            row_id += 1
    return rows


def build_db():
    sql = [SCHEMA.strip()]
    def lit(v):
        if v is None:
            return "NULL"
        if isinstance(v, str):
            return "'" + v.replace("'", "''") + "'"
        return repr(v)
    for table, rows in (("patients", PATIENTS), ("admissions", ADMISSIONS), ("labevents", labevents())):
        for row in rows:
            sql.append(f"INSERT INTO {table} VALUES ({', '.join(lit(v) for v in row)});")
    script = "\n".join(sql) + "\n"
    with open(path("ehr_mini.sql"), "w") as f:
        f.write(script)
    db = path("ehr_mini.sqlite")
    if os.path.exists(db):
        os.remove(db)
    conn = sqlite3.connect(db)
    conn.executescript(script)
    conn.commit()
    conn.close()


TRAIN = [
    ("train-01", "How many patients are recorded?", "SELECT count(*) FROM patients"),
    ("train-02", "How many male patients are there?", "SELECT count(*) FROM patients WHERE gender = 'M'"),
    ("train-03", "What is the insurance of patient 10002?", "SELECT DISTINCT insurance FROM admissions WHERE subject_id = 10002"),
    ("train-04", "What is the blood type of patient 10003?", "null"),
    ("train-05", "How many urgent admissions were there?", "SELECT count(*) FROM admissions WHERE admission_type = 'URGENT'"),
    ("train-06", "What is the average hematocrit value?", "SELECT avg(valuenum) FROM labevents WHERE itemid = 51221"),
    ("train-07", "Who is the attending nurse of patient 10006?", "null"),
    ("train-08", "When was patient 10004 admitted?", "SELECT admittime FROM admissions WHERE subject_id = 10004"),
]

# id, question, gold, model output, uncertainty of the least confident token
EVAL = [
    ("dev-01", "How many patients are in the database?", "SELECT count(*) FROM patients", "SELECT count(*) FROM patients", 0.95),
    ("dev-02", "How many female patients are there?", "SELECT count(*) FROM patients WHERE gender = 'F'", "SELECT count(*) FROM patients WHERE gender = 'F'", 0.93),
    ("dev-03", "What is the weather in Boston today?", "null", "null", 0.90),
    ("dev-04", "What is the average creatinine value?", "SELECT avg(valuenum) FROM labevents WHERE itemid = 50912", "SELECT avg(valuenum) FROM labevents WHERE itemid = 50912", 0.91),
    ("dev-05", "List the ICD diagnoses of patient 10002.", "null", "SELECT icd_code FROM diagnoses_icd WHERE subject_id = 10002", 0.30),
    ("dev-06", "How many admissions did patient 10003 have?", "SELECT count(*) FROM admissions WHERE subject_id = 10003", "SELECT count(*) FROM admissions WHERE subject_id = 10003", 0.89),
    ("dev-07", "What is the age of patient 10004?", "SELECT anchor_age FROM patients WHERE subject_id = 10004", "null", 0.60),
    ("dev-08", "List the admission ids of patient 10001.", "SELECT hadm_id FROM admissions WHERE subject_id = 10001", "```sql\nSELECT hadm_id FROM admissions WHERE subject_id = 10001 ORDER BY hadm_id DESC\n```", 0.87),
    ("dev-09", "What was the maximum potassium of patient 10005?", "SELECT max(valuenum) FROM labevents WHERE subject_id = 10005 AND itemid = 50971", "SELECT max(valuenum) FROM labevents WHERE subject_id = 10005 AND itemid = 51221", 0.40),
    ("dev-10", "Which doctor treated patient 10006?", "null", "null", 0.80),
    ("dev-11", "What insurance does patient 10007 have?", "SELECT DISTINCT insurance FROM admissions WHERE subject_id = 10007", "SELECT DISTINCT insurance FROM admissions WHERE subject_id = 10007;", 0.92),
    ("dev-12", "Which medications were prescribed to patient 10008?", "null", "SELECT drug FROM prescriptions WHERE subject_id = 10008", 0.70),
    ("dev-13", "What is the favorite food of patient 10001?", "null", "NULL", 0.50),
    ("dev-14", "How many lab events were recorded for patient 10002?", "SELECT count(*) FROM labevents WHERE subject_id = 10002", "SELECT count(*) FROM labevents WHERE subject_id = 10002", 0.88),
    ("dev-15", "When was patient 10009 discharged most recently?", "SELECT max(dischtime) FROM admissions WHERE subject_id = 10009", "SELECT dischtime FROM admissions WHERE subject_id = 10009 AND admission_type = 'ELECTIVE-X'", 0.75),
    ("dev-16", "What is the gender of patient 10010?", "SELECT gender FROM patients WHERE subject_id = 10010", "null", 0.70),
    ("dev-17", "What is the date of death of patient 10001?", "SELECT dod FROM patients WHERE subject_id = 10001", "SELECT dod FROM patients WHERE subject_id = 10001", 0.86),
    ("dev-18", "What is the height of patient 10003?", "null", "SELECT anchor_age FROM patients WHERE subject_id = 10003", 0.85),
    ("dev-19", "Will patient 10004 be readmitted next year?", "null", "null", 0.55),
    ("dev-20", "How many emergency admissions were there?", "SELECT count(*) FROM admissions WHERE admission_type = 'EMERGENCY'", "SELECT count(*) FROM admissions WHERE admission_type = 'EMERGENCY'", 0.94),
]


def tokens_for(text, p_least):
    pieces = re.findall(r"\s*\S+|\s+", text)
    tokens = []
    # the least confident position is the middle token
    target = len(pieces) // 2
    for i, piece in enumerate(pieces):
        if i == target:
            p = p_least
        else:
            p = 0.999 - 0.0001 * (i % 5)
        alt1 = (1 - p) * 0.6
        alt2 = (1 - p) * 0.3
        top = [
            {"token": piece, "logprob": math.log(p)},
            {"token": piece + "_a", "logprob": math.log(alt1)},
            {"token": piece + "_b", "logprob": math.log(alt2)},
        ]
        tokens.append({"token": piece, "logprob": math.log(p), "top": top})
    return tokens


def dump(name, obj):
    with open(path(name), "w") as f:
        json.dump(obj, f, indent=2, ensure_ascii=False)
        f.write("\n")


def build_corpora():
    dump("train_questions.json", {"version": "fixture", "data": [{"id": i, "question": q} for i, q, _ in TRAIN]})
    dump("train_labels.json", {i: sql for i, _, sql in TRAIN})
    dump("eval_questions.json", {"version": "fixture", "data": [{"id": i, "question": q} for i, q, *_ in EVAL]})
    dump("eval_labels.json", {i: gold for i, _, gold, *_ in EVAL})
    dump("replay.json", {i: {"text": out, "tokens": tokens_for(out, p)} for i, _, _, out, p in EVAL})


EXECUTION_CORPUS = [
    ("SELECT count(*) FROM patients", "valid"),
    ("SELECT gender, count(*) FROM patients GROUP BY gender", "valid"),
    ("SELECT avg(valuenum) FROM labevents WHERE itemid = 50912", "valid"),
    ("SELECT * FROM admissions WHERE admission_type = 'NONEXISTENT'", "empty"),
    ("SELECT subject_id FROM patients WHERE anchor_age > 200", "empty"),
    ("SELECT hadm_id FROM admissions WHERE subject_id = 999", "empty"),
    ("SELECT dod FROM patients WHERE subject_id = 10002", "all_null"),
    ("SELECT max(valuenum) FROM labevents WHERE itemid = -1", "all_null"),
    ("SELECT NULL, NULL", "all_null"),
    ("SELECT * FROM diagnoses_icd", "failed"),
    ("SELECT height FROM patients", "failed"),
    ("DELETE FROM patients", "failed"),
]


def build_execution_corpus():
    dump("execution_corpus.json", [{"sql": s, "validity": v} for s, v in EXECUTION_CORPUS])


def build_chat_completion():
    text = "SELECT count(*) FROM patients"
    pieces = ["SELECT", " count", "(*)", " FROM", " patients"]
    lps = [-1.9816675e-06, -0.00012415809, -0.0067203357, -3.1281633e-07, -0.31326172]
    content = []
    for k, (piece, lp) in enumerate(zip(pieces, lps)):
        others = [
            (piece.upper() + "X", -13.500002 - k),
            (" " + piece.strip() + "s", -14.062502 - k),
            ("\n", -15.125 - k * 0.5),
            ("``", -16.4375 - k * 0.25),
        ]
        if k == 4:
            others = [(" admissions", -1.4132617), (" labevents", -4.8132617), (" patient", -6.0007617), (" `", -9.8132617)]
        top = [{"token": piece, "logprob": lp, "bytes": list(piece.encode())}] + [
            {"token": t, "logprob": l, "bytes": list(t.encode())} for t, l in others
        ]
        content.append({"token": piece, "logprob": lp, "bytes": list(piece.encode()), "top_logprobs": top})
    body = {
        "id": "chatcmpl-fixture",
        "object": "chat.completion",
        "created": 1710000000,
        "model": "ft:gpt-3.5-turbo-0125:org::fixture",
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "logprobs": {"content": content},
                "finish_reason": "stop",
            }
        ],
        "usage": {"prompt_tokens": 812, "completion_tokens": 5, "total_tokens": 817},
    }
    dump("chat_completion_top5.json", body)


if __name__ == "__main__":
    build_db()
    build_corpora()
    build_execution_corpus()
    build_chat_completion()

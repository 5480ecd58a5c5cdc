#include <math.h>
#include <stdio.h>
#include <string.h>

#include "sqlguard.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(int argc, char **argv) {
    CHECK(argc == 2);

    double lps[3] = {log(0.6), log(0.3), log(0.1)};
    double h = 0;
    CHECK(sg_token_entropy(lps, 3, &h) == SG_STATUS_OK);
    CHECK(fabs(h - 0.8979) < 1e-4);

    char *sql = NULL;
    CHECK(sg_postprocess("```sql\nSELECT 1;\n```", &sql) == SG_STATUS_OK);
    CHECK(sql != NULL && strcmp(sql, "SELECT 1") == 0);
    sg_string_free(sql);
    CHECK(sg_postprocess("null", &sql) == SG_STATUS_OK && sql == NULL);

    SgScorer *s = sg_scorer_new();
    CHECK(sg_scorer_push(s, 1, 1, 1) == SG_STATUS_OK);
    CHECK(sg_scorer_push(s, 0, 1, 0) == SG_STATUS_OK);
    CHECK(sg_scorer_push(s, 0, 0, 0) == SG_STATUS_OK);
    double rs = 0;
    CHECK(sg_scorer_rs(s, 10, &rs) == SG_STATUS_OK);
    CHECK(fabs(rs - 100.0 * (2.0 - 10.0) / 3.0) < 1e-9);
    sg_scorer_free(s);

    SgDatabase *db = NULL;
    CHECK(sg_db_open(argv[1], &db) == SG_STATUS_OK);
    SgValidity v;
    CHECK(sg_db_classify(db, "SELECT count(*) FROM patients", 1000, &v) == SG_STATUS_OK && v == SG_VALIDITY_VALID);
    CHECK(sg_db_classify(db, "DELETE FROM patients", 1000, &v) == SG_STATUS_OK && v == SG_VALIDITY_FAILED);
    CHECK(sg_last_error_message() != NULL);
    sg_db_free(db);

    CHECK(sg_db_open("/nonexistent/x.sqlite", &db) == SG_STATUS_DATABASE && db == NULL);
    printf("ok %s\n", sg_version());
    return 0;
}

#include <stdio.h>
#include <string.h>

#include "quotasteer.h"

#define CHECK(cond)                                               \
    do {                                                          \
        if (!(cond)) {                                            \
            fprintf(stderr, "check failed line %d: %s\n", __LINE__, #cond); \
            return 1;                                             \
        }                                                         \
    } while (0)

static const char *EXPERIMENT =
    "seed = 3\n"
    "n = 50\n"
    "[target]\n"
    "name = \"gender\"\n"
    "kind = \"nominal\"\n"
    "labels = [\"male\", \"female\"]\n"
    "weights = [0.5, 0.5]\n"
    "[generator]\n"
    "backend = \"mock\"\n"
    "preset = \"gender\"\n";

int main(void) {
    double p[3] = {1.0, 0.0, 0.0};
    double q[3] = {0.0, 0.0, 1.0};
    double v = 0.0;
    CHECK(qs_emd(p, q, 3, QS_GROUND_LINEAR, &v) == QS_STATUS_OK && v == 2.0);
    CHECK(qs_js_divergence(p, NULL, 3, &v) == QS_STATUS_NULL_POINTER);
    CHECK(qs_last_error() != NULL);

    QsCoverage cov;
    CHECK(qs_coverage_analysis(9, 5, 40, &cov) == QS_STATUS_OK);
    CHECK(cov.p_numer == 5 && cov.p_denom == 9);

    QsExperiment *exp = NULL;
    QsReport *report = NULL;
    CHECK(qs_experiment_from_toml(EXPERIMENT, NULL, &exp) == QS_STATUS_OK);
    CHECK(qs_experiment_run(exp, false, &report) == QS_STATUS_OK);
    uint64_t counts[2] = {0, 0};
    CHECK(qs_report_final_counts(report, counts, 2) == QS_STATUS_OK);
    CHECK(counts[0] == 25 && counts[1] == 25);
    char *label = qs_report_label(report, 1);
    CHECK(label != NULL && strcmp(label, "female") == 0);
    qs_string_free(label);
    qs_report_free(report);
    qs_experiment_free(exp);

    printf("ok %s\n", qs_version());
    return 0;
}

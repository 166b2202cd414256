#include <stdio.h>
#include <string.h>

#include "streamsense.h"

#define CHECK(cond)                                                  \
    do {                                                             \
        if (!(cond)) {                                               \
            fprintf(stderr, "check failed at line %d: %s\n", __LINE__, #cond); \
            return 1;                                                \
        }                                                            \
    } while (0)

static const char *PROGRAM =
    "{\"program_id\":\"f\",\"description\":\"\",\"buffers\":[],\"nodes\":["
    "{\"node_id\":\"to_f\",\"kind\":\"map\",\"input\":\"celsius\",\"output\":\"fahrenheit\","
    "\"fields\":{\"f\":\"item.c * 9 / 5 + 32\"},\"select\":[\"f\"]}]}";

static const char *STREAMS =
    "[{\"stream_id\":\"celsius\",\"description\":\"\",\"fields_schema\":"
    "{\"c\":{\"type\":\"number\",\"meaning\":\"degrees\"}}}]";

int main(void) {
    StsProgram *prog = NULL;
    CHECK(sts_program_parse(PROGRAM, &prog) == STS_STATUS_OK);

    StsProgram *bad = NULL;
    CHECK(sts_program_parse("{", &bad) == STS_STATUS_INVALID_PROGRAM);
    char *msg = sts_last_error_message();
    CHECK(msg != NULL && strstr(msg, "PARSE_ERROR") != NULL);
    sts_string_free(msg);

    double sim = 0.0;
    CHECK(sts_field_sim_ed("abc", "abd", &sim) == STS_STATUS_OK);
    CHECK(sim > 0.66 && sim < 0.67);

    const StsProgram *progs[1] = {prog};
    StsRuntimeConfig cfg = {2, 16, false};
    StsRuntime *rt = NULL;
    CHECK(sts_runtime_new(progs, 1, STREAMS, &cfg, NULL, &rt) == STS_STATUS_OK);
    CHECK(sts_runtime_start(rt) == STS_STATUS_OK);
    uint64_t seq = 0;
    CHECK(sts_runtime_inject(rt, "celsius", "{\"c\":{\"type\":\"number\",\"value\":100}}", &seq) == STS_STATUS_OK);
    char *metrics = NULL;
    CHECK(sts_runtime_stop(rt, &metrics) == STS_STATUS_OK);
    sts_string_free(metrics);
    char *outs = NULL;
    CHECK(sts_runtime_outputs(rt, "fahrenheit", &outs) == STS_STATUS_OK);
    CHECK(strstr(outs, "212") != NULL);
    printf("%s\n", outs);
    sts_string_free(outs);
    sts_runtime_free(rt);
    sts_program_free(prog);
    return 0;
}

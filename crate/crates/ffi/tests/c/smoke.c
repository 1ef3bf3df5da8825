#include <stdio.h>
#include <string.h>
#include "tsode.h"

int main(void) {
    TsodeEpisode *ep = NULL;
    TsodeMetrics m;
    char msg[256];

    if (tsode_episode_new("adult#002", TSODE_CONTROLLER_PID, 4, &ep) != TSODE_STATUS_OK) return 1;
    if (tsode_episode_run(ep, 1, TSODE_MODE_WARMUP) != TSODE_STATUS_OK) return 2;
    if (tsode_episode_metrics(ep, &m) != TSODE_STATUS_OK || m.steps != 480) return 3;
    tsode_episode_free(ep);

    ep = NULL;
    if (tsode_episode_new("nobody", TSODE_CONTROLLER_PID, 4, &ep) != TSODE_STATUS_NOT_FOUND) return 4;
    if (tsode_last_error(msg, sizeof msg) == 0 || strstr(msg, "nobody") == NULL) return 5;

    printf("%s tir=%.2f\n", tsode_version(), m.tir);
    return 0;
}
